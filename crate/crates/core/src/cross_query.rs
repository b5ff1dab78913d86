//! Query construction for prompt retrieval.
//!
//! The cross-modal query lets each modality's features attend to the other
//! modality, keeps a residual to its own features, pools over the sequence
//! and applies a learnable per-dimension modulation:
//! `q_Q = w_Q * pool(A_Q(F_Q, F_V, F_V) + F_Q)` and symmetrically for `q_V`.
//! The remaining strategies are the fusion baselines and the isolated
//! (single-modality) query used by pool-based prompting without interaction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pool_sequence, AttentionParams, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    /// Each modality queries with its own pooled features.
    Isolated,
    CrossQuery,
    Plus,
    MeanPool,
    Hadamard,
    CrossAttention,
}

impl QueryStrategy {
    pub const NAMES: [&'static str; 6] = [
        "isolated",
        "cross_query",
        "plus",
        "mean_pool",
        "hadamard",
        "cross_attention",
    ];
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QueryStrategy::Isolated => "isolated",
            QueryStrategy::CrossQuery => "cross_query",
            QueryStrategy::Plus => "plus",
            QueryStrategy::MeanPool => "mean_pool",
            QueryStrategy::Hadamard => "hadamard",
            QueryStrategy::CrossAttention => "cross_attention",
        };
        f.write_str(s)
    }
}

impl FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "isolated" => QueryStrategy::Isolated,
            "cross_query" => QueryStrategy::CrossQuery,
            "plus" => QueryStrategy::Plus,
            "mean_pool" => QueryStrategy::MeanPool,
            "hadamard" => QueryStrategy::Hadamard,
            "cross_attention" => QueryStrategy::CrossAttention,
            other => {
                return Err(Error::Config(format!(
                    "unknown query strategy '{other}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

/// How the modulation weights start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationInit {
    /// Constant one.
    Ones,
    /// Uniform in `[0.5, 1.5]`.
    Uniform,
}

impl FromStr for ModulationInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ones" => Ok(ModulationInit::Ones),
            "uniform" => Ok(ModulationInit::Uniform),
            other => Err(Error::Config(format!(
                "unknown modulation init '{other}' (expected ones or uniform)"
            ))),
        }
    }
}

impl fmt::Display for ModulationInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModulationInit::Ones => "ones",
            ModulationInit::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryParams {
    pub dim: usize,
    pub strategy: QueryStrategy,
    pub attn_q: AttentionParams,
    pub attn_v: AttentionParams,
}

pub const W_Q: &str = "query.w_q";
pub const W_V: &str = "query.w_v";

impl QueryParams {
    pub fn new(dim: usize, heads: usize, strategy: QueryStrategy) -> Result<Self> {
        Ok(Self {
            dim,
            strategy,
            attn_q: AttentionParams::new("query.attn_q", dim, heads, 1)?,
            attn_v: AttentionParams::new("query.attn_v", dim, heads, 1)?,
        })
    }

    pub fn init(&self, store: &mut ParamStore, w_init: ModulationInit, rng: &mut impl Rng) {
        for name in [W_Q, W_V] {
            let w = match w_init {
                ModulationInit::Ones => Tensor::filled(1, self.dim, 1.0),
                ModulationInit::Uniform => {
                    Tensor::row((0..self.dim).map(|_| rng.gen_range(0.5..=1.5)).collect())
                }
            };
            store.insert(name, w, true);
        }
        self.attn_q.init(store, true, rng);
        self.attn_v.init(store, true, rng);
    }

    /// Parameter names the configured strategy actually reads.
    pub fn active_params(&self) -> Vec<String> {
        match self.strategy {
            QueryStrategy::CrossQuery => {
                let mut v = vec![W_Q.to_string(), W_V.to_string()];
                v.extend(self.attn_q.param_names());
                v.extend(self.attn_v.param_names());
                v
            }
            QueryStrategy::CrossAttention => {
                let mut v = self.attn_q.param_names();
                v.extend(self.attn_v.param_names());
                v
            }
            _ => Vec::new(),
        }
    }
}

/// Builds `(q_Q, q_V)`, each `1 x d`, from `F_Q` (`l_Q x d`) and `F_V`
/// (`l_V x d`).
pub fn build_queries(
    g: &mut Graph,
    store: &ParamStore,
    fq: Var,
    fv: Var,
    params: &QueryParams,
) -> Result<(Var, Var)> {
    let ((lq, dq), (lv, dv)) = (g.shape(fq), g.shape(fv));
    if dq != dv || dq != params.dim {
        return Err(Error::Config(format!(
            "modality widths differ: question {dq}, vision {dv}, query dim {}",
            params.dim
        )));
    }
    if lq == 0 || lv == 0 {
        return Err(Error::EmptyInput("build_queries"));
    }
    match params.strategy {
        QueryStrategy::Isolated => {
            let u = pool_sequence(g, fq)?;
            let v = pool_sequence(g, fv)?;
            Ok((u, v))
        }
        QueryStrategy::CrossQuery => {
            let aq = params.attn_q.forward(g, store, fq, fv, fv, None)?;
            let av = params.attn_v.forward(g, store, fv, fq, fq, None)?;
            let rq = g.add(aq, fq)?;
            let rv = g.add(av, fv)?;
            let pq = pool_sequence(g, rq)?;
            let pv = pool_sequence(g, rv)?;
            let wq = g.param(store, W_Q)?;
            let wv = g.param(store, W_V)?;
            Ok((g.mul(wq, pq)?, g.mul(wv, pv)?))
        }
        QueryStrategy::Plus => {
            let u = pool_sequence(g, fq)?;
            let v = pool_sequence(g, fv)?;
            let s = g.add(u, v)?;
            Ok((s, s))
        }
        QueryStrategy::MeanPool => {
            let u = pool_sequence(g, fq)?;
            let v = pool_sequence(g, fv)?;
            let s = g.add(u, v)?;
            let m = g.scale(s, 0.5)?;
            Ok((m, m))
        }
        QueryStrategy::Hadamard => {
            let u = pool_sequence(g, fq)?;
            let v = pool_sequence(g, fv)?;
            let h = g.mul(u, v)?;
            Ok((h, h))
        }
        QueryStrategy::CrossAttention => {
            let aq = params.attn_q.forward(g, store, fq, fv, fv, None)?;
            let av = params.attn_v.forward(g, store, fv, fq, fq, None)?;
            Ok((pool_sequence(g, aq)?, pool_sequence(g, av)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(strategy: QueryStrategy) -> (ParamStore, QueryParams, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let p = QueryParams::new(8, 2, strategy).unwrap();
        p.init(&mut s, ModulationInit::Ones, &mut rng);
        let fq = gaussian(3, 8, 1.0, &mut rng);
        let fv = gaussian(4, 8, 1.0, &mut rng);
        (s, p, fq, fv)
    }

    fn queries(s: &ParamStore, p: &QueryParams, fq: &Tensor, fv: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let a = g.constant(fq.clone());
        let b = g.constant(fv.clone());
        let (q, v) = build_queries(&mut g, s, a, b, p).unwrap();
        (g.value(q).clone(), g.value(v).clone())
    }

    fn mean_rows(t: &Tensor) -> Vec<f64> {
        (0..t.cols())
            .map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / t.rows() as f64)
            .collect()
    }

    /// Zero gain and bias on the block's final norm silence the attention
    /// term, leaving the residual path.
    #[test]
    fn silenced_attention_leaves_pooled_features() {
        let (mut s, p, fq, fv) = setup(QueryStrategy::CrossQuery);
        for attn in [&p.attn_q, &p.attn_v] {
            s.set(&format!("{}.ln2_g", attn.prefix), Tensor::zeros(1, 8)).unwrap();
        }
        let (q, v) = queries(&s, &p, &fq, &fv);
        for (a, b) in q.data().iter().zip(mean_rows(&fq)) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in v.data().iter().zip(mean_rows(&fv)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_modulation_annihilates() {
        let (mut s, p, fq, fv) = setup(QueryStrategy::CrossQuery);
        s.set(W_Q, Tensor::zeros(1, 8)).unwrap();
        let (q, _) = queries(&s, &p, &fq, &fv);
        assert!(q.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn baselines_match_direct_evaluation() {
        let (s, p, fq, fv) = setup(QueryStrategy::Plus);
        let (u, v) = (mean_rows(&fq), mean_rows(&fv));
        let (q, qv) = queries(&s, &p, &fq, &fv);
        for i in 0..8 {
            assert!((q.data()[i] - (u[i] + v[i])).abs() < 1e-14);
            assert_eq!(q.data()[i], qv.data()[i]);
        }
        let p2 = QueryParams { strategy: QueryStrategy::MeanPool, ..p.clone() };
        let (q, _) = queries(&s, &p2, &fq, &fv);
        for i in 0..8 {
            assert!((q.data()[i] - 0.5 * (u[i] + v[i])).abs() < 1e-14);
        }
        let p3 = QueryParams { strategy: QueryStrategy::Hadamard, ..p.clone() };
        let (q, _) = queries(&s, &p3, &fq, &fv);
        for i in 0..8 {
            assert!((q.data()[i] - u[i] * v[i]).abs() < 1e-14);
        }
        let p4 = QueryParams { strategy: QueryStrategy::Isolated, ..p };
        let (q, qv) = queries(&s, &p4, &fq, &fv);
        assert_eq!(q.data(), &u[..]);
        assert_eq!(qv.data(), &v[..]);
    }

    #[test]
    fn output_is_one_row_for_any_lengths() {
        let (s, p, _, _) = setup(QueryStrategy::CrossQuery);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (lq, lv) in [(1, 1), (1, 5), (6, 2)] {
            let fq = gaussian(lq, 8, 1.0, &mut rng);
            let fv = gaussian(lv, 8, 1.0, &mut rng);
            let (q, v) = queries(&s, &p, &fq, &fv);
            assert_eq!((q.rows(), q.cols(), v.rows(), v.cols()), (1, 8, 1, 8));
        }
    }

    #[test]
    fn swapping_modalities_swaps_outputs() {
        let (s, p, fq, fv) = setup(QueryStrategy::CrossQuery);
        // Build a store where the Q and V parameter sets are exchanged.
        let mut swapped = s.clone();
        for (a, b) in p.attn_q.param_names().iter().zip(p.attn_v.param_names()) {
            swapped.set(a, s.get(&b).unwrap().clone()).unwrap();
            swapped.set(&b, s.get(a).unwrap().clone()).unwrap();
        }
        let (q, v) = queries(&s, &p, &fq, &fv);
        let (q2, v2) = queries(&swapped, &p, &fv, &fq);
        assert!(q.max_abs_diff(&v2) < 1e-14);
        assert!(v.max_abs_diff(&q2) < 1e-14);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (s, p, fq, _) = setup(QueryStrategy::CrossQuery);
        let mut g = Graph::new();
        let a = g.constant(fq);
        let b = g.constant(Tensor::zeros(2, 6));
        assert!(matches!(build_queries(&mut g, &s, a, b, &p), Err(Error::Config(_))));
    }

    #[test]
    fn strategy_names_round_trip() {
        for n in QueryStrategy::NAMES {
            assert_eq!(n.parse::<QueryStrategy>().unwrap().to_string(), n);
        }
        assert!("sum".parse::<QueryStrategy>().is_err());
    }
}
