//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op as a node holding its forward value. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that depends on a trainable leaf. Frozen values enter as
//! constants and never receive a gradient buffer.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    LayerNormRows(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Cosine(Var, Var),
    RowCosine(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter bound on the graph, keyed by
    /// parameter name. Parameters that did not influence the root get a zero
    /// gradient of the right shape only if they were bound as trainable.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].as_ref().map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named parameter from `store`. Repeated calls return the same
    /// node. Frozen parameters are bound as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = store
            .entry(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        self.nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Leaf,
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(op, format!("{:?} vs {:?}", sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip keeps shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(t, Op::Add(a, b), g, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(t, Op::Sub(a, b), g, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(t, Op::Mul(a, b), g, "mul")
    }

    /// `a (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.shape(a), self.shape(b));
        if br != 1 || bc != n {
            return dim_err("add_row", format!("{m}x{n} + {br}x{bc}"));
        }
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, b), g, "add_row")
    }

    /// `a (m x n) * b (1 x n)` elementwise, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.shape(a), self.shape(b));
        if br != 1 || bc != n {
            return dim_err("mul_row", format!("{m}x{n} * {br}x{bc}"));
        }
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *x *= y;
            }
        }
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, data)?, Op::MulRow(a, b), g, "mul_row")
    }

    /// `a * s` where `s` is a `1 x 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return dim_err("mul_scalar", format!("scalar has shape {:?}", self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = self.value(a).map(|x| x * sv);
        let g = self.any_grad(&[a, s]);
        self.push(t, Op::MulScalarVar(a, s), g, "mul_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), g, "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        let g = self.any_grad(&[a]);
        self.push(t, Op::AddConst(a), g, "add_const")
    }

    /// `c - a`.
    pub fn rsub_const(&mut self, c: f64, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_const(neg, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return dim_err("matmul", format!("{m}x{k} * {k2}x{n}"));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), g, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let g = self.any_grad(&[a]);
        self.push(Tensor::matrix(n, m, data)?, Op::Transpose(a), g, "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).reshaped(rows, cols)?;
        let g = self.any_grad(&[a]);
        self.push(t, Op::Reshape(a), g, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g, "sum")
    }

    /// Mean over the row (sequence) axis, producing a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let g = self.any_grad(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), g, "mean_rows")
    }

    /// Row-wise softmax. `allowed`, when given, marks which columns may
    /// receive probability mass; masked columns get exactly zero.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(mask) = allowed {
            if mask.len() != n {
                return dim_err("softmax_rows", format!("mask {} vs {} cols", mask.len(), n));
            }
            if !mask.iter().any(|&x| x) {
                return dim_err("softmax_rows", "every column masked");
            }
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let ok = |j: usize| allowed.map_or(true, |mk| mk[j]);
            let mx = (0..n)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                if ok(j) {
                    let e = (row[j] - mx).exp();
                    data[r * n + j] = e;
                    z += e;
                }
            }
            for v in &mut data[r * n..(r + 1) * n] {
                *v /= z;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(Tensor::matrix(m, n, data)?, Op::SoftmaxRows(a), g, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[r * n + j] = row[j] - lse;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::LogSoftmaxRows(a),
            g,
            "log_softmax_rows",
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(t, Op::Sigmoid(a), g, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let g = self.any_grad(&[a]);
        self.push(t, Op::Relu(a), g, "relu")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::sqrt);
        let g = self.any_grad(&[a]);
        self.push(t, Op::Sqrt(a), g, "sqrt")
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[r * n + j] = (row[j] - mu) * inv;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::LayerNormRows(a, eps),
            g,
            "layer_norm_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != n {
                return dim_err("concat_rows", format!("column counts {n} vs {pc}"));
            }
            data.extend_from_slice(self.value(p).data());
            m += pr;
        }
        let g = self.any_grad(parts);
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatRows(parts.to_vec()),
            g,
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        for &p in parts {
            if self.shape(p).0 != m {
                return dim_err("concat_cols", format!("row counts differ ({m})"));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let g = self.any_grad(parts);
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatCols(parts.to_vec()),
            g,
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > m || len == 0 {
            return dim_err("slice_rows", format!("[{start}, {}) of {m} rows", start + len));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let g = self.any_grad(&[a]);
        self.push(Tensor::matrix(len, n, data)?, Op::SliceRows(a, start), g, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n || len == 0 {
            return dim_err("slice_cols", format!("[{start}, {}) of {n} cols", start + len));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let g = self.any_grad(&[a]);
        self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start), g, "slice_cols")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return dim_err("gather_rows", format!("row {i} of {m}"));
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let g = self.any_grad(&[a]);
        self.push(
            Tensor::matrix(idx.len(), n, data)?,
            Op::GatherRows(a, idx.to_vec()),
            g,
            "gather_rows",
        )
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_cols"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * m);
        for r in 0..m {
            for &j in idx {
                if j >= n {
                    return dim_err("gather_cols", format!("col {j} of {n}"));
                }
                data.push(src[r * n + j]);
            }
        }
        let g = self.any_grad(&[a]);
        self.push(
            Tensor::matrix(m, idx.len(), data)?,
            Op::GatherCols(a, idx.to_vec()),
            g,
            "gather_cols",
        )
    }

    /// Cosine similarity of two equally sized tensors, viewed as flat
    /// vectors. Errors on a zero-norm operand.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return dim_err("cosine", format!("{} vs {} values", ta.len(), tb.len()));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateQuery);
        }
        let c = ta.dot(tb) / (na * nb);
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(c), Op::Cosine(a, b), g, "cosine")
    }

    /// Cosine similarity of a `1 x d` query against every row of `keys`
    /// (`n x d`), producing `1 x n`. Zero-norm keys score 0.
    pub fn row_cosine(&mut self, q: Var, keys: Var) -> Result<Var> {
        let ((qr, d), (n, kd)) = (self.shape(q), self.shape(keys));
        if qr != 1 || kd != d {
            return dim_err("row_cosine", format!("{qr}x{d} against {n}x{kd}"));
        }
        let tq = self.value(q);
        let qn = tq.norm();
        if qn == 0.0 {
            return Err(Error::DegenerateQuery);
        }
        let tk = self.value(keys);
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let k = tk.row_slice(i);
                let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt();
                if kn == 0.0 {
                    0.0
                } else {
                    k.iter().zip(tq.data()).map(|(a, b)| a * b).sum::<f64>() / (kn * qn)
                }
            })
            .collect();
        let g = self.any_grad(&[q, keys]);
        self.push(Tensor::row(out), Op::RowCosine(q, keys), g, "row_cosine")
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return dim_err("backward", format!("root has shape {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self
                .bound
                .iter()
                .filter(|(_, v)| self.nodes[v.0].needs_grad)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let t = zip_t(g, val(*b), |x, y| x * y);
                    self.accum(grads, *a, t)?;
                }
                if wants(*b) {
                    let t = zip_t(g, val(*a), |x, y| x * y);
                    self.accum(grads, *b, t)?;
                }
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, g.clone())?;
                if wants(*b) {
                    self.accum(grads, *b, col_sums(g))?;
                }
            }
            Op::MulRow(a, b) => {
                let (m, n) = (g.rows(), g.cols());
                if wants(*a) {
                    let bv = val(*b).data();
                    let mut d = g.data().to_vec();
                    for r in 0..m {
                        for (x, y) in d[r * n..(r + 1) * n].iter_mut().zip(bv) {
                            *x *= y;
                        }
                    }
                    self.accum(grads, *a, Tensor::matrix(m, n, d)?)?;
                }
                if wants(*b) {
                    let prod = zip_t(g, val(*a), |x, y| x * y);
                    self.accum(grads, *b, col_sums(&prod))?;
                }
            }
            Op::MulScalarVar(a, s) => {
                let sv = val(*s).item();
                if wants(*a) {
                    self.accum(grads, *a, g.map(|x| x * sv))?;
                }
                if wants(*s) {
                    let d = g.dot(val(*a));
                    self.accum(grads, *s, Tensor::scalar(d))?;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|x| x * c))?;
            }
            Op::AddConst(a) => self.accum(grads, *a, g.clone())?,
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let d = matmul_a_bt(g.data(), tb.data(), m, n, k);
                    self.accum(grads, *a, Tensor::matrix(m, k, d)?)?;
                }
                if wants(*b) {
                    let d = matmul_at_b(ta.data(), g.data(), m, k, n);
                    self.accum(grads, *b, Tensor::matrix(k, n, d)?)?;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.accum(grads, *a, Tensor::matrix(n, m, d)?)?;
            }
            Op::Reshape(a) => {
                let ta = val(*a);
                let t = Tensor::new(ta.shape().to_vec(), g.data().to_vec())?;
                self.accum(grads, *a, t)?;
            }
            Op::Sum(a) => {
                let gv = g.item();
                let ta = val(*a);
                self.accum(grads, *a, Tensor::filled(ta.rows(), ta.cols(), gv))?;
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|x| x / m as f64));
                }
                self.accum(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gr[j] - y[r * n + j].exp() * gs;
                    }
                }
                self.accum(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::Sigmoid(a) => {
                let t = zip_t(g, out, |gv, s| gv * s * (1.0 - s));
                self.accum(grads, *a, t)?;
            }
            Op::Relu(a) => {
                let t = zip_t(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accum(grads, *a, t)?;
            }
            Op::Sqrt(a) => {
                let t = zip_t(g, out, |gv, s| gv * 0.5 / s);
                self.accum(grads, *a, t)?;
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let (m, n) = (x.rows(), x.cols());
                let xhat = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let row = &x.data()[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let gmean = gr.iter().sum::<f64>() / n as f64;
                    let gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] = inv * (gr[j] - gmean - xr[j] * gx);
                    }
                }
                self.accum(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    if wants(p) {
                        let d = g.data()[off * n..(off + pr) * n].to_vec();
                        self.accum(grads, p, Tensor::matrix(pr, n, d)?)?;
                    }
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * n + off..r * n + off + w]);
                        }
                        self.accum(grads, p, Tensor::matrix(m, w, d)?)?;
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let n = ta.cols();
                let mut t = Tensor::zeros(ta.rows(), n);
                t.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accum(grads, *a, t)?;
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let w = g.cols();
                let mut t = Tensor::zeros(m, n);
                for r in 0..m {
                    t.data_mut()[r * n + start..r * n + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accum(grads, *a, t)?;
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let n = ta.cols();
                let mut t = Tensor::zeros(ta.rows(), n);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        t.data_mut()[i * n + j] += g.data()[k * n + j];
                    }
                }
                self.accum(grads, *a, t)?;
            }
            Op::GatherCols(a, idx) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let w = idx.len();
                let mut t = Tensor::zeros(m, n);
                for r in 0..m {
                    for (k, &j) in idx.iter().enumerate() {
                        t.data_mut()[r * n + j] += g.data()[r * w + k];
                    }
                }
                self.accum(grads, *a, t)?;
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                let c = out.item();
                let gv = g.item();
                if wants(*a) {
                    let d = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(x, y)| gv * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    self.accum(grads, *a, Tensor::new(ta.shape().to_vec(), d)?)?;
                }
                if wants(*b) {
                    let d = tb
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(y, x)| gv * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    self.accum(grads, *b, Tensor::new(tb.shape().to_vec(), d)?)?;
                }
            }
            Op::RowCosine(q, keys) => {
                let (tq, tk) = (val(*q), val(*keys));
                let (n, d) = (tk.rows(), tk.cols());
                let qn = tq.norm();
                let mut gq = vec![0.0; d];
                let mut gk = vec![0.0; n * d];
                for i in 0..n {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let k = tk.row_slice(i);
                    let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if kn == 0.0 {
                        continue;
                    }
                    let c = out.data()[i];
                    for j in 0..d {
                        gq[j] += gi * (k[j] / (kn * qn) - c * tq.data()[j] / (qn * qn));
                        gk[i * d + j] = gi * (tq.data()[j] / (kn * qn) - c * k[j] / (kn * kn));
                    }
                }
                if wants(*q) {
                    self.accum(grads, *q, Tensor::row(gq))?;
                }
                if wants(*keys) {
                    self.accum(grads, *keys, Tensor::matrix(n, d, gk)?)?;
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip keeps shape")
}

fn col_sums(g: &Tensor) -> Tensor {
    let (m, n) = (g.rows(), g.cols());
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, x) in out.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
            *o += x;
        }
    }
    Tensor::row(out)
}
