use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Dense row-major float64 tensor.
///
/// Every op in this crate works on rank-2 tensors. A vector of length `d`
/// is stored as a `1 x d` row; a scalar as `1 x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 x d` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return dim_err(
                "reshape",
                format!("cannot view {} values as {}x{}", self.data.len(), rows, cols),
            );
        }
        Ok(Self {
            shape: vec![rows, cols],
            data: self.data.clone(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += scale * other`, shapes must agree.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.data.len() != other.data.len() {
            return dim_err("axpy", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric { op: op.to_string() })
        }
    }
}

/// `a (m x k) * b (k x n)` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T (k x m)^T * b (m x n)`, i.e. contracts over rows of both.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    // a is m x k, b is m x n, result k x n
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x n) * b^T` where b is `k x n`; result `m x k`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let ab = matmul_raw(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![5.0, 11.0, 14.0, 23.0]);
        // b^T is 2x3 -> a * (b^T)^T
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0];
        assert_eq!(matmul_a_bt(&a, &bt, 2, 3, 2), ab);
        // a^T (3x2) * ab (2x2)
        let atb = matmul_at_b(&a, &ab, 2, 3, 2);
        assert_eq!(atb[0], 1.0 * 5.0 + 4.0 * 14.0);
    }
}
