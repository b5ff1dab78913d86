//! Multi-head attention block used for every attention module in the model.
//!
//! Block layout (post-norm): `x = LN(q + MHA(q, k, v))`, then
//! `y = LN(x + FFN(x))` with a two-layer ReLU feed-forward of width
//! `ffn_mult * dim`. Weights live in a [`ParamStore`] under a name prefix.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{gaussian, ParamStore};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

const LN_EPS: f64 = 1e-5;

/// Anything that maps `(queries, keys, values)` to a sequence shaped like
/// `queries`.
pub trait SeqMixer {
    fn mix(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var>;

    fn mix_self(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.mix(g, store, x, x, x)
    }
}

/// Returns the queries unchanged. Useful to isolate the algebra around an
/// attention call.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMixer;

impl SeqMixer for IdentityMixer {
    fn mix(&self, _g: &mut Graph, _s: &ParamStore, q: Var, _k: Var, _v: Var) -> Result<Var> {
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub prefix: String,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, dim: usize, num_heads: usize, ffn_mult: usize) -> Result<Self> {
        if num_heads == 0 || dim == 0 || dim % num_heads != 0 {
            return dim_err("attention", format!("dim {dim} not divisible by {num_heads} heads"));
        }
        if ffn_mult == 0 {
            return dim_err("attention", "ffn multiplier must be positive");
        }
        Ok(Self {
            prefix: prefix.into(),
            num_heads,
            head_dim: dim / num_heads,
            ffn_mult,
        })
    }

    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.dim()
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{}", self.prefix, s)
    }

    pub fn param_names(&self) -> Vec<String> {
        [
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "ffn_w1", "ffn_b1",
            "ffn_w2", "ffn_b2", "ln2_g", "ln2_b",
        ]
        .iter()
        .map(|s| self.name(s))
        .collect()
    }

    /// Registers freshly initialized weights. Projections are drawn from
    /// N(0, 1/d); biases start at zero and layer-norm gains at one.
    pub fn init(&self, store: &mut ParamStore, trainable: bool, rng: &mut impl Rng) {
        let d = self.dim();
        let h = self.hidden();
        let std = 1.0 / (d as f64).sqrt();
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(self.name(w), gaussian(d, d, std, rng), trainable);
        }
        for b in ["bq", "bk", "bv", "bo", "ln1_b", "ln2_b", "ffn_b2"] {
            store.insert(self.name(b), Tensor::zeros(1, d), trainable);
        }
        store.insert(self.name("ffn_b1"), Tensor::zeros(1, h), trainable);
        store.insert(self.name("ffn_w1"), gaussian(d, h, std, rng), trainable);
        store.insert(self.name("ffn_w2"), gaussian(h, d, 1.0 / (h as f64).sqrt(), rng), trainable);
        store.insert(self.name("ln1_g"), Tensor::filled(1, d, 1.0), trainable);
        store.insert(self.name("ln2_g"), Tensor::filled(1, d, 1.0), trainable);
    }

    fn linear(&self, g: &mut Graph, s: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = g.param(s, &self.name(w))?;
        let b = g.param(s, &self.name(b))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, s: &ParamStore, x: Var, gain: &str, bias: &str) -> Result<Var> {
        let n = g.layer_norm_rows(x, LN_EPS)?;
        let gain = g.param(s, &self.name(gain))?;
        let bias = g.param(s, &self.name(bias))?;
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }

    /// Multi-head attention output before the output projection: heads are
    /// computed on projected inputs and concatenated.
    pub fn heads(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let qp = self.linear(g, s, q, "wq", "bq")?;
        let kp = self.linear(g, s, k, "wk", "bk")?;
        let vp = self.linear(g, s, v, "wv", "bv")?;
        let mut outs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let start = h * self.head_dim;
            let qh = g.slice_cols(qp, start, self.head_dim)?;
            let kh = g.slice_cols(kp, start, self.head_dim)?;
            let vh = g.slice_cols(vp, start, self.head_dim)?;
            outs.push(scaled_dot_product(g, qh, kh, vh, key_mask)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    /// Full block with an optional key mask (`true` = key may be attended).
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = self.dim();
        let ((qm, qd), (kn, kd), (vn, vd)) = (g.shape(q), g.shape(k), g.shape(v));
        if qd != d || kd != d || vd != d || kn != vn || qm == 0 || kn == 0 {
            return dim_err(
                "attention",
                format!("q {qm}x{qd}, k {kn}x{kd}, v {vn}x{vd}, model dim {d}"),
            );
        }
        let heads = self.heads(g, s, q, k, v, key_mask)?;
        let attn = self.linear(g, s, heads, "wo", "bo")?;
        let r1 = g.add(q, attn)?;
        let x = self.norm(g, s, r1, "ln1_g", "ln1_b")?;
        let h1 = self.linear(g, s, x, "ffn_w1", "ffn_b1")?;
        let h1 = g.relu(h1)?;
        let f = self.linear(g, s, h1, "ffn_w2", "ffn_b2")?;
        let r2 = g.add(x, f)?;
        self.norm(g, s, r2, "ln2_g", "ln2_b")
    }
}

impl SeqMixer for AttentionParams {
    fn mix(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        self.forward(g, store, q, k, v, None)
    }
}

/// `softmax(q k^T / sqrt(d_k)) v` for a single head.
pub fn scaled_dot_product(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let dk = g.shape(k).1;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let w = g.softmax_rows(scores, key_mask)?;
    g.matmul(w, v)
}
