//! Cross-modal prompt recovery.
//!
//! Given the aggregated prompts `p~Q`, `p~V` of one tier, a shared binary
//! mask zeroes the same coordinates of both, each modality is rebuilt from
//! its own context plus a light cross term (intra phase), then refined by
//! attending to the other modality and a gated self-enhancement (inter
//! phase). Two auxiliary losses come out of the pipeline.
//!
//! Prompts are `1 x d` rows. Attention modules see them through a token
//! view: the row is reshaped into `t` tokens of width `d / t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, AttentionParams, Graph, ParamStore, SeqMixer, Tensor, Var};
use crate::prompt_store::Modality;

/// Parameters under this prefix get weight decay.
pub const DECAY_PREFIX: &str = "recovery.attn_loss_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryToggles {
    pub enabled: bool,
    pub intra: bool,
    pub inter: bool,
    pub intra_loss: bool,
    pub inter_loss: bool,
}

impl RecoveryToggles {
    pub const FULL: Self = Self {
        enabled: true,
        intra: true,
        inter: true,
        intra_loss: true,
        inter_loss: true,
    };

    pub const OFF: Self = Self {
        enabled: false,
        intra: false,
        inter: false,
        intra_loss: false,
        inter_loss: false,
    };

    pub fn intra_loss_active(&self) -> bool {
        self.enabled && self.intra && self.intra_loss
    }

    pub fn inter_loss_active(&self) -> bool {
        self.enabled && self.inter && self.inter_loss
    }
}

impl Default for RecoveryToggles {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryParams {
    pub dim: usize,
    pub token_view: usize,
    pub delta: f64,
    pub intra_q: AttentionParams,
    pub intra_v: AttentionParams,
    pub inter_q: AttentionParams,
    pub inter_v: AttentionParams,
    pub gate_q: AttentionParams,
    pub gate_v: AttentionParams,
    pub loss_q: AttentionParams,
    pub loss_v: AttentionParams,
}

pub fn w_res_name(m: Modality) -> &'static str {
    match m {
        Modality::Q => "recovery.w_res_q",
        Modality::V => "recovery.w_res_v",
    }
}

pub fn w_gate_name(m: Modality) -> &'static str {
    match m {
        Modality::Q => "recovery.w_gate_q",
        Modality::V => "recovery.w_gate_v",
    }
}

impl RecoveryParams {
    pub fn new(dim: usize, token_view: usize, heads: usize, delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Config(format!(
                "recovery.delta = {delta} is outside the valid range [0, 1]"
            )));
        }
        if token_view == 0 || dim % token_view != 0 {
            return Err(Error::Config(format!(
                "recovery.token_view = {token_view} must divide the model dimension {dim}"
            )));
        }
        let w = dim / token_view;
        let a = |name: &str, mult| AttentionParams::new(format!("recovery.{name}"), w, heads, mult);
        Ok(Self {
            dim,
            token_view,
            delta,
            intra_q: a("attn_intra_q", 1)?,
            intra_v: a("attn_intra_v", 1)?,
            inter_q: a("attn_inter_q", 1)?,
            inter_v: a("attn_inter_v", 1)?,
            gate_q: a("attn_gate_q", 2)?,
            gate_v: a("attn_gate_v", 2)?,
            loss_q: a("attn_loss_q", 1)?,
            loss_v: a("attn_loss_v", 1)?,
        })
    }

    fn attns(&self) -> [&AttentionParams; 8] {
        [
            &self.intra_q,
            &self.intra_v,
            &self.inter_q,
            &self.inter_v,
            &self.gate_q,
            &self.gate_v,
            &self.loss_q,
            &self.loss_v,
        ]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for m in [Modality::Q, Modality::V] {
            store.insert(w_res_name(m), gaussian(1, self.dim, 1e-3, rng), true);
            let std = 1.0 / ((2 * self.dim) as f64).sqrt();
            store.insert(w_gate_name(m), gaussian(self.dim, 2 * self.dim, std, rng), true);
        }
        for a in self.attns() {
            a.init(store, true, rng);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = [Modality::Q, Modality::V]
            .iter()
            .flat_map(|m| [w_res_name(*m).to_string(), w_gate_name(*m).to_string()])
            .collect();
        for a in self.attns() {
            v.extend(a.param_names());
        }
        v
    }

    fn pick(&self, m: Modality) -> (&AttentionParams, &AttentionParams, &AttentionParams, &AttentionParams) {
        match m {
            Modality::Q => (&self.intra_q, &self.inter_q, &self.gate_q, &self.loss_q),
            Modality::V => (&self.intra_v, &self.inter_v, &self.gate_v, &self.loss_v),
        }
    }
}

/// Binary mask `b` with 1 marking a masked coordinate; each coordinate is
/// masked independently with probability `delta`.
pub fn sample_mask(d: usize, delta: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!(
            "mask probability {delta} is outside the valid range [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::row(
        (0..d)
            .map(|_| if rng.gen::<f64>() < delta { 1.0 } else { 0.0 })
            .collect(),
    ))
}

/// `(1 - b) * p`.
pub fn apply_mask(g: &mut Graph, p: Var, mask: &Tensor) -> Result<Var> {
    let keep = g.constant(mask.map(|b| 1.0 - b));
    g.mul(p, keep)
}

/// Runs `mixer` on the token view of a `1 x d` query and key/value row.
fn token_mix(
    g: &mut Graph,
    store: &ParamStore,
    mixer: &dyn SeqMixer,
    t: usize,
    q: Var,
    kv: Var,
) -> Result<Var> {
    let d = g.shape(q).1;
    if t == 0 || d % t != 0 {
        return Err(Error::Config(format!("token view {t} does not divide {d}")));
    }
    let qt = g.reshape(q, t, d / t)?;
    let kvt = if kv == q { qt } else { g.reshape(kv, t, d / t)? };
    let out = mixer.mix(g, store, qt, kvt, kvt)?;
    g.reshape(out, 1, d)
}

/// `A_intra(p^) + w_res * p~other`.
pub fn intra_recover(
    g: &mut Graph,
    store: &ParamStore,
    mixer: &dyn SeqMixer,
    t: usize,
    p_hat_self: Var,
    p_tilde_other: Var,
    w_res: Var,
) -> Result<Var> {
    let a = token_mix(g, store, mixer, t, p_hat_self, p_hat_self)?;
    let cross = g.mul(w_res, p_tilde_other)?;
    g.add(a, cross)
}

/// `||w w^T - I||_F^2` via its closed form `|w|^4 - 2|w|^2 + d`.
pub fn orthogonality_penalty(g: &mut Graph, w: Var) -> Result<Var> {
    let d = g.value(w).len() as f64;
    let sq = g.mul(w, w)?;
    let n2 = g.sum(sq)?;
    let n4 = g.mul(n2, n2)?;
    let two = g.scale(n2, 2.0)?;
    let diff = g.sub(n4, two)?;
    g.add_const(diff, d)
}

fn sq_dist(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// Reconstruction error of both modalities plus both orthogonality terms.
pub fn intra_loss(
    g: &mut Graph,
    p_intra_q: Var,
    p_intra_v: Var,
    p_tilde_q: Var,
    p_tilde_v: Var,
    w_res_q: Var,
    w_res_v: Var,
) -> Result<Var> {
    let rq = sq_dist(g, p_intra_q, p_tilde_q)?;
    let rv = sq_dist(g, p_intra_v, p_tilde_v)?;
    let oq = orthogonality_penalty(g, w_res_q)?;
    let ov = orthogonality_penalty(g, w_res_v)?;
    let a = g.add(rq, rv)?;
    let b = g.add(oq, ov)?;
    g.add(a, b)
}

/// `A_inter(p_intra, p~other, p~other) + p_intra`.
pub fn inter_recover(
    g: &mut Graph,
    store: &ParamStore,
    mixer: &dyn SeqMixer,
    t: usize,
    p_intra_self: Var,
    p_tilde_other: Var,
) -> Result<Var> {
    let a = token_mix(g, store, mixer, t, p_intra_self, p_tilde_other)?;
    g.add(a, p_intra_self)
}

/// `sigmoid(W_g relu([p_inter ; p~other]))` with `W_g` of shape `d x 2d`.
pub fn compute_gate(g: &mut Graph, p_inter_self: Var, p_tilde_other: Var, w_gate: Var) -> Result<Var> {
    let x = g.concat_cols(&[p_inter_self, p_tilde_other])?;
    let x = g.relu(x)?;
    let wt = g.transpose(w_gate)?;
    let z = g.matmul(x, wt)?;
    g.sigmoid(z)
}

/// `(1 - g) * p_inter + g * A_gate(p_inter)`.
pub fn gated_enhance(
    g: &mut Graph,
    store: &ParamStore,
    mixer: &dyn SeqMixer,
    t: usize,
    p_inter: Var,
    gate: Var,
) -> Result<Var> {
    let enhanced = token_mix(g, store, mixer, t, p_inter, p_inter)?;
    let closed = g.rsub_const(1.0, gate)?;
    let a = g.mul(closed, p_inter)?;
    let b = g.mul(gate, enhanced)?;
    g.add(a, b)
}

/// `1 - cos(A_loss^Q(p_fQ, p~V, p~V), A_loss^V(p_fV, p~Q, p~Q))`. When either
/// attention output has zero norm the cosine is undefined; the loss is then
/// the constant 1 and the flag is set.
#[allow(clippy::too_many_arguments)]
pub fn inter_loss(
    g: &mut Graph,
    store: &ParamStore,
    mixer_q: &dyn SeqMixer,
    mixer_v: &dyn SeqMixer,
    t: usize,
    p_final_q: Var,
    p_final_v: Var,
    p_tilde_q: Var,
    p_tilde_v: Var,
) -> Result<(Var, bool)> {
    let aq = token_mix(g, store, mixer_q, t, p_final_q, p_tilde_v)?;
    let av = token_mix(g, store, mixer_v, t, p_final_v, p_tilde_q)?;
    if g.value(aq).norm() == 0.0 || g.value(av).norm() == 0.0 {
        return Ok((g.constant(Tensor::scalar(1.0)), true));
    }
    let c = g.cosine(aq, av)?;
    Ok((g.rsub_const(1.0, c)?, false))
}

/// Every intermediate prompt state of one recovery, as values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryBundle {
    pub p_tilde_q: Tensor,
    pub p_tilde_v: Tensor,
    pub mask: Tensor,
    pub p_hat_q: Tensor,
    pub p_hat_v: Tensor,
    pub p_intra_q: Tensor,
    pub p_intra_v: Tensor,
    pub p_inter_q: Tensor,
    pub p_inter_v: Tensor,
    pub gate_q: Option<Tensor>,
    pub gate_v: Option<Tensor>,
    pub p_final_q: Tensor,
    pub p_final_v: Tensor,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub inter_degenerate: bool,
}

/// Graph handles produced by [`run_recovery`].
#[derive(Debug, Clone)]
pub struct RecoveryOutput {
    pub p_final_q: Var,
    pub p_final_v: Var,
    pub loss_intra: Option<Var>,
    pub loss_inter: Option<Var>,
    pub bundle: RecoveryBundle,
}

/// Masking, intra phase, inter phase and losses for one tier pair. `mask`
/// of `None` disables masking (evaluation).
pub fn run_recovery(
    g: &mut Graph,
    store: &ParamStore,
    params: &RecoveryParams,
    p_tilde_q: Var,
    p_tilde_v: Var,
    mask: Option<&Tensor>,
    toggles: RecoveryToggles,
) -> Result<RecoveryOutput> {
    let d = params.dim;
    for v in [p_tilde_q, p_tilde_v] {
        if g.shape(v) != (1, d) {
            return Err(Error::Dimension {
                op: "run_recovery",
                detail: format!("prompt {:?}, expected (1, {d})", g.shape(v)),
            });
        }
    }
    let mask_t = mask.cloned().unwrap_or_else(|| Tensor::zeros(1, d));
    let val = |g: &Graph, v: Var| g.value(v).clone();
    if !toggles.enabled {
        let (tq, tv) = (val(g, p_tilde_q), val(g, p_tilde_v));
        return Ok(RecoveryOutput {
            p_final_q: p_tilde_q,
            p_final_v: p_tilde_v,
            loss_intra: None,
            loss_inter: None,
            bundle: RecoveryBundle {
                p_tilde_q: tq.clone(),
                p_tilde_v: tv.clone(),
                mask: Tensor::zeros(1, d),
                p_hat_q: tq.clone(),
                p_hat_v: tv.clone(),
                p_intra_q: tq.clone(),
                p_intra_v: tv.clone(),
                p_inter_q: tq.clone(),
                p_inter_v: tv.clone(),
                gate_q: None,
                gate_v: None,
                p_final_q: tq,
                p_final_v: tv,
                loss_intra: 0.0,
                loss_inter: 0.0,
                inter_degenerate: false,
            },
        });
    }

    let t = params.token_view;
    // One mask instance for both modalities.
    let (p_hat_q, p_hat_v) = match mask {
        Some(m) => (apply_mask(g, p_tilde_q, m)?, apply_mask(g, p_tilde_v, m)?),
        None => (p_tilde_q, p_tilde_v),
    };

    let mut p_intra = [p_hat_q, p_hat_v];
    let mut w_res = [None, None];
    if toggles.intra {
        for (i, m) in [Modality::Q, Modality::V].into_iter().enumerate() {
            let (intra, ..) = params.pick(m);
            let w = g.param(store, w_res_name(m))?;
            w_res[i] = Some(w);
            let (hat, other) = if i == 0 { (p_hat_q, p_tilde_v) } else { (p_hat_v, p_tilde_q) };
            p_intra[i] = intra_recover(g, store, intra, t, hat, other, w)?;
        }
    }

    let mut p_inter = p_intra;
    let mut gates = [None, None];
    let mut p_final = p_intra;
    if toggles.inter {
        for (i, m) in [Modality::Q, Modality::V].into_iter().enumerate() {
            let (_, inter, gate_attn, _) = params.pick(m);
            let other = if i == 0 { p_tilde_v } else { p_tilde_q };
            p_inter[i] = inter_recover(g, store, inter, t, p_intra[i], other)?;
            let wg = g.param(store, w_gate_name(m))?;
            let gate = compute_gate(g, p_inter[i], other, wg)?;
            gates[i] = Some(gate);
            p_final[i] = gated_enhance(g, store, gate_attn, t, p_inter[i], gate)?;
        }
    }

    let loss_intra = if toggles.intra_loss_active() {
        let (wq, wv) = (w_res[0].expect("intra phase ran"), w_res[1].expect("intra phase ran"));
        Some(intra_loss(g, p_intra[0], p_intra[1], p_tilde_q, p_tilde_v, wq, wv)?)
    } else {
        None
    };
    let mut degenerate = false;
    let loss_inter = if toggles.inter_loss_active() {
        let (l, flag) = inter_loss(
            g,
            store,
            &params.loss_q,
            &params.loss_v,
            t,
            p_final[0],
            p_final[1],
            p_tilde_q,
            p_tilde_v,
        )?;
        degenerate = flag;
        Some(l)
    } else {
        None
    };

    let bundle = RecoveryBundle {
        p_tilde_q: val(g, p_tilde_q),
        p_tilde_v: val(g, p_tilde_v),
        mask: mask_t,
        p_hat_q: val(g, p_hat_q),
        p_hat_v: val(g, p_hat_v),
        p_intra_q: val(g, p_intra[0]),
        p_intra_v: val(g, p_intra[1]),
        p_inter_q: val(g, p_inter[0]),
        p_inter_v: val(g, p_inter[1]),
        gate_q: gates[0].map(|v| val(g, v)),
        gate_v: gates[1].map(|v| val(g, v)),
        p_final_q: val(g, p_final[0]),
        p_final_v: val(g, p_final[1]),
        loss_intra: loss_intra.map_or(0.0, |v| g.value(v).item()),
        loss_inter: loss_inter.map_or(0.0, |v| g.value(v).item()),
        inter_degenerate: degenerate,
    };
    Ok(RecoveryOutput {
        p_final_q: p_final[0],
        p_final_v: p_final[1],
        loss_intra,
        loss_inter,
        bundle,
    })
}

/// Value-level recovery with a mask drawn from `seed` at the configured
/// `delta`.
pub fn recover_values(
    store: &ParamStore,
    params: &RecoveryParams,
    p_tilde_q: &Tensor,
    p_tilde_v: &Tensor,
    seed: u64,
    toggles: RecoveryToggles,
) -> Result<RecoveryBundle> {
    let mask = sample_mask(params.dim, params.delta, seed)?;
    let mut g = Graph::new();
    let q = g.constant(p_tilde_q.clone());
    let v = g.constant(p_tilde_v.clone());
    Ok(run_recovery(&mut g, store, params, q, v, Some(&mask), toggles)?.bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, IdentityMixer};
    use proptest::prelude::*;

    fn setup(d: usize, t: usize, delta: f64, seed: u64) -> (ParamStore, RecoveryParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RecoveryParams::new(d, t, 1, delta).unwrap();
        let mut s = ParamStore::new();
        p.init(&mut s, &mut rng);
        (s, p)
    }

    fn rand_row(d: usize, seed: u64) -> Tensor {
        gaussian(1, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn mask_boundaries() {
        assert!(sample_mask(16, 0.0, 1).unwrap().data().iter().all(|b| *b == 0.0));
        assert!(sample_mask(16, 1.0, 1).unwrap().data().iter().all(|b| *b == 1.0));
        assert!(sample_mask(4, 1.5, 1).is_err());
        assert!(sample_mask(4, -0.1, 1).is_err());
        assert_eq!(sample_mask(32, 0.3, 7).unwrap(), sample_mask(32, 0.3, 7).unwrap());
    }

    #[test]
    fn mask_fraction_concentrates() {
        let m = sample_mask(10_000, 0.05, 42).unwrap();
        let frac = m.data().iter().sum::<f64>() / 10_000.0;
        assert!((0.04..=0.06).contains(&frac), "{frac}");
    }

    #[test]
    fn apply_mask_matches_loop() {
        let p = rand_row(12, 3);
        let m = sample_mask(12, 0.5, 9).unwrap();
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let out = apply_mask(&mut g, v, &m).unwrap();
        for i in 0..12 {
            let want = if m.data()[i] == 1.0 { 0.0 } else { p.data()[i] };
            assert_eq!(g.value(out).data()[i], want);
        }
    }

    #[test]
    fn intra_with_identity_attention() {
        let s = ParamStore::new();
        let mut g = Graph::new();
        let hat = g.constant(rand_row(8, 1));
        let other = g.constant(rand_row(8, 2));
        let zero = g.constant(Tensor::zeros(1, 8));
        let out = intra_recover(&mut g, &s, &IdentityMixer, 4, hat, other, zero).unwrap();
        assert_eq!(g.value(out), g.value(hat));

        let ones = g.constant(Tensor::filled(1, 8, 1.0));
        let out = intra_recover(&mut g, &s, &IdentityMixer, 4, zero, other, ones).unwrap();
        assert_eq!(g.value(out), g.value(other));
    }

    #[test]
    fn intra_loss_perfect_recovery_and_zero_weights() {
        let mut g = Graph::new();
        let d = 6;
        let pq = g.constant(rand_row(d, 1));
        let pv = g.constant(rand_row(d, 2));
        let z = g.constant(Tensor::zeros(1, d));
        let l = intra_loss(&mut g, pq, pv, pq, pv, z, z).unwrap();
        assert_eq!(g.value(l).item(), 2.0 * d as f64);
    }

    /// Reference: build the outer product explicitly.
    fn ortho_by_outer(w: &[f64]) -> f64 {
        let d = w.len();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let e = w[i] * w[j] - if i == j { 1.0 } else { 0.0 };
                s += e * e;
            }
        }
        s
    }

    #[test]
    fn orthogonality_closed_form_and_unit_norm() {
        let mut g = Graph::new();
        let mut u = rand_row(9, 4);
        let n = u.norm();
        u = u.map(|x| x / n);
        let w = g.constant(u);
        let o = orthogonality_penalty(&mut g, w).unwrap();
        assert!((g.value(o).item() - 8.0).abs() < 1e-12);
        for seed in 0..20 {
            let r = rand_row(7, 100 + seed);
            let w = g.constant(r.clone());
            let o = orthogonality_penalty(&mut g, w).unwrap();
            assert!((g.value(o).item() - ortho_by_outer(r.data())).abs() < 1e-10);
        }
    }

    #[test]
    fn inter_with_silenced_attention_is_residual() {
        let (mut s, p) = setup(8, 2, 0.0, 1);
        s.set("recovery.attn_inter_q.ln2_g", Tensor::zeros(1, 4)).unwrap();
        let mut g = Graph::new();
        let a = g.constant(rand_row(8, 1));
        let b = g.constant(rand_row(8, 2));
        let out = inter_recover(&mut g, &s, &p.inter_q, 2, a, b).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn gate_special_cases() {
        let mut g = Graph::new();
        let a = g.constant(rand_row(4, 1));
        let b = g.constant(rand_row(4, 2));
        let w0 = g.constant(Tensor::zeros(4, 8));
        let gate = compute_gate(&mut g, a, b, w0).unwrap();
        assert!(g.value(gate).data().iter().all(|x| *x == 0.5));
        let neg = g.constant(Tensor::filled(1, 4, -1.0));
        let w = g.constant(gaussian(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let gate = compute_gate(&mut g, neg, neg, w).unwrap();
        assert!(g.value(gate).data().iter().all(|x| *x == 0.5));
    }

    #[test]
    fn gate_matches_direct_evaluation() {
        let (a, b) = (rand_row(4, 1), rand_row(4, 2));
        let w = gaussian(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let (av, bv, wv) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(w.clone()));
        let gate = compute_gate(&mut g, av, bv, wv).unwrap();
        let x: Vec<f64> = a.data().iter().chain(b.data()).map(|v| v.max(0.0)).collect();
        for i in 0..4 {
            let z: f64 = (0..8).map(|j| w.get(i, j) * x[j]).sum();
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((g.value(gate).data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn gated_enhance_blends() {
        let (s2, p) = setup(8, 2, 0.0, 1);
        let mut g = Graph::new();
        let x = g.constant(rand_row(8, 5));
        let one = g.constant(Tensor::filled(1, 8, 1.0));
        let zero = g.constant(Tensor::zeros(1, 8));
        let half = g.constant(Tensor::filled(1, 8, 0.5));
        let open = gated_enhance(&mut g, &s2, &p.gate_q, 2, x, one).unwrap();
        let closed = gated_enhance(&mut g, &s2, &p.gate_q, 2, x, zero).unwrap();
        let mid = gated_enhance(&mut g, &s2, &p.gate_q, 2, x, half).unwrap();
        let a = token_mix(&mut g, &s2, &p.gate_q, 2, x, x).unwrap();
        assert_eq!(g.value(open), g.value(a));
        assert_eq!(g.value(closed), g.value(x));
        for i in 0..8 {
            let want = 0.5 * g.value(x).data()[i] + 0.5 * g.value(a).data()[i];
            assert!((g.value(mid).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn inter_loss_extremes() {
        let s = ParamStore::new();
        let id = IdentityMixer;
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 2.0, 0.0, -1.0]));
        let b = g.constant(Tensor::row(vec![0.0, 0.0, 3.0, 0.0]));
        let na = g.scale(a, -2.0).unwrap();
        let z = g.constant(Tensor::zeros(1, 4));
        let check = |g: &mut Graph, x, y, want: f64, flag: bool| {
            let (l, f) = inter_loss(g, &s, &id, &id, 2, x, y, z, z).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-12);
            assert_eq!(f, flag);
        };
        check(&mut g, a, a, 0.0, false);
        check(&mut g, a, b, 1.0, false);
        check(&mut g, a, na, 2.0, false);
        check(&mut g, a, z, 1.0, true);
    }

    #[test]
    fn bypass_is_identity() {
        let (s, p) = setup(8, 2, 0.5, 1);
        let (q, v) = (rand_row(8, 1), rand_row(8, 2));
        let b = recover_values(&s, &p, &q, &v, 3, RecoveryToggles::OFF).unwrap();
        assert_eq!(b.p_final_q, q);
        assert_eq!(b.p_final_v, v);
        assert_eq!((b.loss_intra, b.loss_inter), (0.0, 0.0));
    }

    #[test]
    fn zero_delta_keeps_prompts() {
        let (s, p) = setup(8, 2, 0.0, 1);
        let (q, v) = (rand_row(8, 1), rand_row(8, 2));
        let b = recover_values(&s, &p, &q, &v, 3, RecoveryToggles::FULL).unwrap();
        assert_eq!(b.p_hat_q, q);
        assert_eq!(b.p_hat_v, v);
        assert!(b.loss_intra > 0.0);
    }

    #[test]
    fn full_delta_zeroes_prompts() {
        let (s, p) = setup(8, 2, 1.0, 1);
        let b = recover_values(&s, &p, &rand_row(8, 1), &rand_row(8, 2), 3, RecoveryToggles::FULL).unwrap();
        assert!(b.p_hat_q.data().iter().chain(b.p_hat_v.data()).all(|x| *x == 0.0));
    }

    #[test]
    fn pipeline_matches_chained_operations() {
        let (s, p) = setup(8, 2, 0.4, 2);
        let (q, v) = (rand_row(8, 1), rand_row(8, 2));
        let b = recover_values(&s, &p, &q, &v, 11, RecoveryToggles::FULL).unwrap();
        let mask = sample_mask(8, 0.4, 11).unwrap();
        assert_eq!(b.mask, mask);

        let mut g = Graph::new();
        let (tq, tv) = (g.constant(q), g.constant(v));
        let hq = apply_mask(&mut g, tq, &mask).unwrap();
        let hv = apply_mask(&mut g, tv, &mask).unwrap();
        let wq = g.constant(s.get(w_res_name(Modality::Q)).unwrap().clone());
        let wv = g.constant(s.get(w_res_name(Modality::V)).unwrap().clone());
        let iq = intra_recover(&mut g, &s, &p.intra_q, 2, hq, tv, wq).unwrap();
        let iv = intra_recover(&mut g, &s, &p.intra_v, 2, hv, tq, wv).unwrap();
        let eq = inter_recover(&mut g, &s, &p.inter_q, 2, iq, tv).unwrap();
        let gq = g.constant(s.get(w_gate_name(Modality::Q)).unwrap().clone());
        let gate = compute_gate(&mut g, eq, tv, gq).unwrap();
        let fq = gated_enhance(&mut g, &s, &p.gate_q, 2, eq, gate).unwrap();
        let li = intra_loss(&mut g, iq, iv, tq, tv, wq, wv).unwrap();
        assert_eq!(&b.p_hat_q, g.value(hq));
        assert_eq!(&b.p_intra_v, g.value(iv));
        assert_eq!(&b.p_inter_q, g.value(eq));
        assert_eq!(b.gate_q.as_ref().unwrap(), g.value(gate));
        assert_eq!(&b.p_final_q, g.value(fq));
        assert_eq!(b.loss_intra, g.value(li).item());
        assert!((0.0..=2.0).contains(&b.loss_inter));
    }

    #[test]
    fn phase_toggles() {
        let (s, p) = setup(8, 2, 0.3, 2);
        let (q, v) = (rand_row(8, 1), rand_row(8, 2));
        let no_intra = RecoveryToggles { intra: false, ..RecoveryToggles::FULL };
        let b = recover_values(&s, &p, &q, &v, 1, no_intra).unwrap();
        assert_eq!(b.p_intra_q, b.p_hat_q);
        assert_eq!(b.loss_intra, 0.0);
        let no_inter = RecoveryToggles { inter: false, ..RecoveryToggles::FULL };
        let b = recover_values(&s, &p, &q, &v, 1, no_inter).unwrap();
        assert_eq!(b.p_final_q, b.p_intra_q);
        assert!(b.gate_q.is_none());
        assert_eq!(b.loss_inter, 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(RecoveryParams::new(8, 2, 1, 1.5).is_err());
        assert!(RecoveryParams::new(8, 3, 1, 0.1).is_err());
    }

    #[test]
    fn recovery_parameters_pass_gradient_check() {
        let (s, p) = setup(8, 2, 0.25, 5);
        let (q, v) = (rand_row(8, 1), rand_row(8, 2));
        let mask = sample_mask(8, 0.25, 4).unwrap();
        let names = p.param_names();
        let r = grad_check_params(&s, &names, 1e-5, 1e-4, |s, g| {
            let tq = g.constant(q.clone());
            let tv = g.constant(v.clone());
            let out = run_recovery(g, s, &p, tq, tv, Some(&mask), RecoveryToggles::FULL)?;
            let l = g.add(out.loss_intra.unwrap(), out.loss_inter.unwrap())?;
            // include the outputs so the gate path is exercised
            let fq = g.sum(out.p_final_q)?;
            let fv = g.sum(out.p_final_v)?;
            let f = g.add(fq, fv)?;
            g.add(l, f)
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst);
    }

    proptest! {
        #[test]
        fn bounds_hold(seed in 0u64..500, delta in 0.0f64..=1.0) {
            let (s, p) = setup(8, 2, delta, seed);
            let b = recover_values(&s, &p, &rand_row(8, seed + 1), &rand_row(8, seed + 2), seed, RecoveryToggles::FULL).unwrap();
            for gv in b.gate_q.iter().chain(b.gate_v.iter()) {
                prop_assert!(gv.data().iter().all(|x| *x > 0.0 && *x < 1.0));
            }
            prop_assert!((0.0..=2.0).contains(&b.loss_inter));
            prop_assert!(b.loss_intra >= 0.0);
            // same mask on both modalities
            for i in 0..8 {
                if b.mask.data()[i] == 1.0 {
                    prop_assert!(b.p_hat_q.data()[i] == 0.0 && b.p_hat_v.data()[i] == 0.0);
                } else {
                    prop_assert!(b.p_hat_q.data()[i] == b.p_tilde_q.data()[i]);
                    prop_assert!(b.p_hat_v.data()[i] == b.p_tilde_v.data()[i]);
                }
            }
        }
    }
}
