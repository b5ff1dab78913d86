use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named parameter tensors, ordered by name so iteration (and therefore
/// hashing, serialization and the optimizer) is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                trainable,
            },
        );
    }

    pub fn entry(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "param_set",
                detail: format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites (or adds) every entry of `other`.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for s in p.value.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Plain SGD step on the given gradients, with optional L2 decay for
    /// parameters whose names match `decay_prefixes`.
    pub fn sgd_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        decay: f64,
        decay_prefixes: &[&str],
    ) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter '{name}'")))?;
            if !p.trainable {
                continue;
            }
            g.check_finite(&format!("gradient of {name}"))?;
            let mut v = p.value.as_ref().clone();
            if decay > 0.0 && decay_prefixes.iter().any(|d| name.starts_with(d)) {
                let snapshot = v.clone();
                v.axpy(-lr * decay, &snapshot)?;
            }
            v.axpy(-lr, g)?;
            p.value = Arc::new(v);
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

/// Sum of per-name gradient maps, in place.
pub fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) -> Result<()> {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.axpy(1.0, &g)?,
            None => {
                into.insert(k, g);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_values_and_prefix() {
        let mut s = ParamStore::new();
        s.insert("a.x", Tensor::row(vec![1.0, 2.0]), false);
        s.insert("b.y", Tensor::row(vec![3.0]), true);
        let da = s.digest("a.");
        s.set("b.y", Tensor::row(vec![4.0])).unwrap();
        assert_eq!(da, s.digest("a."));
        s.set("a.x", Tensor::row(vec![1.0, 2.5])).unwrap();
        assert_ne!(da, s.digest("a."));
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut s = ParamStore::new();
        s.insert("f", Tensor::row(vec![1.0]), false);
        s.insert("t", Tensor::row(vec![1.0]), true);
        let mut g = BTreeMap::new();
        g.insert("f".to_string(), Tensor::row(vec![1.0]));
        g.insert("t".to_string(), Tensor::row(vec![1.0]));
        s.sgd_step(&g, 0.5, 0.0, &[]).unwrap();
        assert_eq!(s.get("f").unwrap().item(), 1.0);
        assert_eq!(s.get("t").unwrap().item(), 0.5);
    }
}
