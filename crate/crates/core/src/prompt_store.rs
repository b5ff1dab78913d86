//! Prompt pools with learnable keys, cosine top-k retrieval, softmax-weighted
//! aggregation and the query-key alignment loss.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{uniform, Graph, ParamStore, Tensor, Var};

const MIN_KEY_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Q,
    V,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Q => Modality::V,
            Modality::V => Modality::Q,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Modality::Q => "q",
            Modality::V => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    General,
    Expert,
}

impl Tier {
    fn tag(self) -> &'static str {
        match self {
            Tier::General => "g",
            Tier::Expert => "e",
        }
    }
}

/// One (modality, tier) pool: `size` keys and `size` prompts of width `dim`,
/// stored in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub modality: Modality,
    pub tier: Tier,
    pub size: usize,
    pub dim: usize,
}

impl fmt::Display for PromptPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.modality.tag(), self.tier.tag())
    }
}

impl PromptPool {
    pub fn new(modality: Modality, tier: Tier, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "pool {}{} needs positive size and dim",
                modality.tag(),
                tier.tag()
            )));
        }
        Ok(Self {
            modality,
            tier,
            size,
            dim,
        })
    }

    pub fn keys_name(&self) -> String {
        format!("pool.{self}.keys")
    }

    pub fn prompts_name(&self) -> String {
        format!("pool.{self}.prompts")
    }

    /// Keys and prompts uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let b = 1.0 / (self.dim as f64).sqrt();
        store.insert(self.keys_name(), uniform(self.size, self.dim, b, rng), true);
        store.insert(self.prompts_name(), uniform(self.size, self.dim, b, rng), true);
    }

    /// Replaces any key whose norm collapsed below 1e-8 with a scaled basis
    /// vector, so cosine similarity stays defined.
    pub fn renormalize_keys(&self, store: &mut ParamStore) -> Result<()> {
        let keys = store.get(&self.keys_name())?;
        let d = keys.cols();
        let mut fixed = None;
        for r in 0..keys.rows() {
            let n = keys.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < MIN_KEY_NORM {
                let t: &mut Tensor = fixed.get_or_insert_with(|| keys.clone());
                let row = &mut t.data_mut()[r * d..(r + 1) * d];
                row.iter_mut().for_each(|x| *x = 0.0);
                row[r % d] = 1.0 / (d as f64).sqrt();
            }
        }
        if let Some(t) = fixed {
            store.set(&self.keys_name(), t)?;
        }
        Ok(())
    }
}

/// Indices, softmax weights and aggregated prompt of one retrieval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub aggregated: Tensor,
}

/// A retrieval recorded on a graph, so both the task loss and the
/// alignment loss can differentiate through it.
#[derive(Debug, Clone)]
pub struct Retrieved {
    pub selection: Selection,
    pub aggregated: Var,
    /// `1 x k` cosine similarities of the selected keys, in selection order.
    pub cosines: Var,
}

/// Indices of the `k` keys most cosine-similar to `query`, best first;
/// ties go to the lower index.
pub fn select_topk(query: &Tensor, keys: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = keys.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k of {k} from a pool of {n}")));
    }
    if keys.cols() != query.len() {
        return Err(Error::Dimension {
            op: "select_topk",
            detail: format!("query {} vs keys {}", query.len(), keys.cols()),
        });
    }
    let qn = query.norm();
    if qn == 0.0 {
        return Err(Error::DegenerateQuery);
    }
    let sims: Vec<f64> = (0..n)
        .map(|i| {
            let row = keys.row_slice(i);
            let kn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if kn == 0.0 {
                0.0
            } else {
                row.iter().zip(query.data()).map(|(a, b)| a * b).sum::<f64>() / (kn * qn)
            }
        })
        .collect();
    Ok(rank_desc(&sims, k))
}

fn rank_desc(sims: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Retrieval on a graph: cosine scores against every key, top-k, softmax
/// over the selected scores and a weighted sum of the selected prompts.
pub fn retrieve(g: &mut Graph, query: Var, keys: Var, prompts: Var, k: usize) -> Result<Retrieved> {
    let n = g.shape(keys).0;
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k of {k} from a pool of {n}")));
    }
    let scores = g.row_cosine(query, keys)?;
    let indices = rank_desc(g.value(scores).data(), k);
    aggregate_scored(g, scores, prompts, indices)
}

/// Aggregates the given rows of `prompts` with softmax-of-cosine weights.
pub fn aggregate(g: &mut Graph, query: Var, keys: Var, prompts: Var, indices: &[usize]) -> Result<Retrieved> {
    if indices.is_empty() {
        return Err(Error::EmptySelection);
    }
    let scores = g.row_cosine(query, keys)?;
    aggregate_scored(g, scores, prompts, indices.to_vec())
}

fn aggregate_scored(g: &mut Graph, scores: Var, prompts: Var, indices: Vec<usize>) -> Result<Retrieved> {
    if indices.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n = g.shape(prompts).0;
    let mut seen = vec![false; n];
    for &i in &indices {
        if i >= n || seen[i] {
            return Err(Error::Config(format!("invalid or repeated pool index {i}")));
        }
        seen[i] = true;
    }
    let cosines = g.gather_cols(scores, &indices)?;
    let weights = g.softmax_rows(cosines, None)?;
    let rows = g.gather_rows(prompts, &indices)?;
    let aggregated = g.matmul(weights, rows)?;
    Ok(Retrieved {
        selection: Selection {
            indices,
            weights: g.value(weights).data().to_vec(),
            aggregated: g.value(aggregated).clone(),
        },
        aggregated,
        cosines,
    })
}

/// Value-level aggregation, for callers without a graph.
pub fn aggregate_values(query: &Tensor, keys: &Tensor, prompts: &Tensor, indices: &[usize]) -> Result<Selection> {
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let k = g.constant(keys.clone());
    let p = g.constant(prompts.clone());
    Ok(aggregate(&mut g, q, k, p, indices)?.selection)
}

/// `sum over retrievals and selected keys of (1 - cos(q, k_i))`.
pub fn qk_align_loss(g: &mut Graph, retrievals: &[&Retrieved]) -> Result<Var> {
    let mut terms = Vec::with_capacity(retrievals.len());
    for r in retrievals {
        let k = r.selection.indices.len() as f64;
        let s = g.sum(r.cosines)?;
        terms.push(g.rsub_const(k, s)?);
    }
    let mut total = *terms.first().ok_or(Error::EmptySelection)?;
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(total)
}

/// Binds a pool's tensors on a graph and retrieves against `query`.
pub fn retrieve_from_pool(
    g: &mut Graph,
    store: &ParamStore,
    pool: &PromptPool,
    query: Var,
    k: usize,
) -> Result<Retrieved> {
    let keys = g.param(store, &pool.keys_name())?;
    let prompts = g.param(store, &pool.prompts_name())?;
    retrieve(g, query, keys, prompts, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn exact_key_wins() {
        let keys = eye(6);
        let q = Tensor::row(keys.row_slice(3).to_vec());
        assert_eq!(select_topk(&q, &keys, 1).unwrap(), vec![3]);
    }

    #[test]
    fn full_k_sorts_everything() {
        let keys = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let q = Tensor::row(vec![1.0, 0.2]);
        assert_eq!(select_topk(&q, &keys, 3).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let keys = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 0.0, 2.0, 0.0]).unwrap();
        let q = Tensor::row(vec![1.0, 0.0]);
        assert_eq!(select_topk(&q, &keys, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn zero_query_is_degenerate() {
        let q = Tensor::row(vec![0.0, 0.0]);
        assert_eq!(select_topk(&q, &eye(2), 1), Err(Error::DegenerateQuery));
    }

    #[test]
    fn k_larger_than_pool_is_rejected() {
        let q = Tensor::row(vec![1.0, 0.0]);
        assert!(select_topk(&q, &eye(2), 3).is_err());
    }

    #[test]
    fn singleton_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = gaussian(4, 3, 1.0, &mut rng);
        let prompts = gaussian(4, 3, 1.0, &mut rng);
        let q = gaussian(1, 3, 1.0, &mut rng);
        let s = aggregate_values(&q, &keys, &prompts, &[2]).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.aggregated.data(), prompts.row_slice(2));
    }

    #[test]
    fn equal_similarity_gives_midpoint() {
        let keys = Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let prompts = Tensor::matrix(2, 2, vec![0.0, 4.0, 2.0, 0.0]).unwrap();
        let q = Tensor::row(vec![1.0, 1.0]);
        let s = aggregate_values(&q, &keys, &prompts, &[0, 1]).unwrap();
        assert!((s.weights[0] - 0.5).abs() < 1e-15);
        assert!((s.aggregated.data()[0] - 1.0).abs() < 1e-15);
        assert!((s.aggregated.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weights_follow_softmax_of_cosines() {
        // keys at known angles from q = e1: cosines 0.9, 0.5, 0.1
        let cos = [0.9f64, 0.5, 0.1];
        let mut kd = Vec::new();
        for c in cos {
            kd.push(c);
            kd.push((1.0 - c * c).sqrt());
        }
        let keys = Tensor::matrix(3, 2, kd).unwrap();
        let prompts = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
        let q = Tensor::row(vec![1.0, 0.0]);
        let s = aggregate_values(&q, &keys, &prompts, &[0, 1, 2]).unwrap();
        let z: f64 = cos.iter().map(|c| c.exp()).sum();
        let w: Vec<f64> = cos.iter().map(|c| c.exp() / z).collect();
        for i in 0..3 {
            assert!((s.weights[i] - w[i]).abs() < 1e-12);
        }
        for c in 0..2 {
            let direct: f64 = (0..3).map(|i| w[i] * prompts.get(i, c)).sum();
            assert!((s.aggregated.data()[c] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_selection_errors() {
        let q = Tensor::row(vec![1.0, 0.0]);
        assert_eq!(aggregate_values(&q, &eye(2), &eye(2), &[]), Err(Error::EmptySelection));
    }

    #[test]
    fn alignment_loss_bounds() {
        let mut g = Graph::new();
        let keys = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap());
        let prompts = g.constant(eye(2));
        let q = g.constant(Tensor::row(vec![1.0, 0.0]));
        let parallel = aggregate(&mut g, q, keys, prompts, &[0]).unwrap();
        let l = qk_align_loss(&mut g, &[&parallel]).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let orth = aggregate(&mut g, q, keys, prompts, &[1]).unwrap();
        let l = qk_align_loss(&mut g, &[&orth]).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn renormalizes_collapsed_keys() {
        let mut s = ParamStore::new();
        let pool = PromptPool::new(Modality::Q, Tier::General, 2, 2).unwrap();
        s.insert(pool.keys_name(), Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(), true);
        pool.renormalize_keys(&mut s).unwrap();
        assert!(s.get(&pool.keys_name()).unwrap().row_slice(0)[0] > 0.0);
        assert_eq!(s.get(&pool.keys_name()).unwrap().row_slice(1), &[1.0, 1.0]);
    }
}
