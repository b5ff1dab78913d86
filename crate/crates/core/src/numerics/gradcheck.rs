//! Central finite-difference oracle for reverse-mode gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Below this magnitude a gradient is compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_abs_error: f64,
    /// The coordinate with the largest relative error.
    pub worst: Option<GradCheckEntry>,
    pub params: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of a scalar map of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    store.insert("x", point.clone(), true);
    grad_check_params(&store, &["x".to_string()], epsilon, tolerance, |s, g| {
        let x = g.param(s, "x")?;
        f(g, x)
    })
}

/// Checks gradients of `f` with respect to every coordinate of the named
/// parameters. `f` builds the scalar on a fresh graph from a store.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    epsilon: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(s, &mut g)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let root = f(store, &mut g)?;
    let first = g.value(root).item();
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    let analytic = g.backward(root)?.params();

    let mut checked = 0usize;
    let mut sum_rel = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst: Option<GradCheckEntry> = None;
    for name in names {
        let base = store.get(name)?.clone();
        let grad = analytic.get(name).cloned().unwrap_or_else(|| Tensor::zeros_like(&base));
        for i in 0..base.len() {
            let mut s = store.clone();
            let mut plus = base.clone();
            plus.data_mut()[i] += epsilon;
            s.set(name, plus)?;
            let fp = eval(&s)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= epsilon;
            s.set(name, minus)?;
            let fm = eval(&s)?;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            checked += 1;
            sum_rel += rel;
            max_abs = max_abs.max((a - numeric).abs());
            if rel >= max_rel {
                max_rel = rel;
                worst = Some(GradCheckEntry {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        checked,
        max_rel_error: max_rel,
        mean_rel_error: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
        max_abs_error: max_abs,
        worst,
        params: names.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 2);
        // analytic gradient is (2, 4)
        let mut g = Graph::new();
        let v = g.leaf(x);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_quarter() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row(vec![0.0]));
        let s = g.sigmoid(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().item(), 0.25);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let r = grad_check(
            |g, x| {
                let n = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let y = g.scale(x, 1.0 + n)?;
                g.sum(y)
            },
            &Tensor::row(vec![1.0]),
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Determinism { .. })));
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let r = grad_check(|g, x| g.sum(x), &Tensor::row(vec![1.0]), 0.0, 1e-4);
        assert!(r.is_err());
    }
}
