//! Small transformer encoder shared by both modalities.
//!
//! Question tokens go through an embedding table, the vision descriptor is
//! cut into regions that each pass a linear stem; both streams get
//! positional and modality-type embeddings. Prompts are prepended as extra
//! tokens at the configured layers and stripped again after each layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{accumulate, gaussian, AttentionParams, Graph, ParamStore, Tensor, Var};
use crate::taskgen::Sample;

pub const PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// 1-based layer indices receiving the general-tier prompts.
    pub general_layers: Vec<usize>,
    pub expert_layers: Vec<usize>,
    pub token_vocab: usize,
    pub question_len: usize,
    pub regions: usize,
    pub descriptor_dim: usize,
    pub answer_vocab: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("backbone.layers must be positive".into()));
        }
        for l in self.general_layers.iter().chain(&self.expert_layers) {
            if *l == 0 || *l > self.layers {
                return Err(Error::Config(format!(
                    "prompt layer {l} outside 1..={}",
                    self.layers
                )));
            }
        }
        if self.general_layers.iter().any(|l| self.expert_layers.contains(l)) {
            return Err(Error::Config("general and expert layers overlap".into()));
        }
        if self.regions == 0 || self.descriptor_dim % self.regions != 0 {
            return Err(Error::Config(format!(
                "descriptor of {} does not split into {} regions",
                self.descriptor_dim, self.regions
            )));
        }
        if self.answer_vocab == 0 || self.token_vocab == 0 || self.question_len == 0 {
            return Err(Error::Config("empty vocabulary or question".into()));
        }
        Ok(())
    }

    pub fn region_width(&self) -> usize {
        self.descriptor_dim / self.regions
    }
}

/// Digest of every backbone tensor (head included) at freeze time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenSnapshot {
    pub digest: String,
}

impl FrozenSnapshot {
    pub fn take(store: &ParamStore) -> Self {
        Self {
            digest: store.digest(PREFIX),
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.digest == store.digest(PREFIX)
    }
}

/// Final `(Q, V)` prompt rows for the two tiers.
#[derive(Debug, Clone, Copy)]
pub struct TierPrompts {
    pub general: (Var, Var),
    pub expert: (Var, Var),
}

/// How prompt tokens take part in attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    Attend,
    /// Prompt positions are present but masked out as keys.
    Masked,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<AttentionParams>,
}

fn name(s: &str) -> String {
    format!("{PREFIX}{s}")
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let layers = (1..=config.layers)
            .map(|i| AttentionParams::new(name(&format!("layer{i}")), config.dim, config.heads, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = &self.config;
        let d = c.dim;
        let std = 1.0 / (d as f64).sqrt();
        store.insert(name("tok_emb"), gaussian(c.token_vocab, d, 1.0, rng), true);
        store.insert(name("pos_q"), gaussian(c.question_len, d, 0.1, rng), true);
        store.insert(name("pos_v"), gaussian(c.regions, d, 0.1, rng), true);
        store.insert(name("type_q"), gaussian(1, d, 0.1, rng), true);
        store.insert(name("type_v"), gaussian(1, d, 0.1, rng), true);
        let w = c.region_width();
        store.insert(name("stem_w"), gaussian(w, d, 1.0 / (w as f64).sqrt(), rng), true);
        store.insert(name("stem_b"), Tensor::zeros(1, d), true);
        for l in &self.layers {
            l.init(store, true, rng);
        }
        store.insert(name("head_w"), gaussian(d, c.answer_vocab, std, rng), true);
        store.insert(name("head_b"), Tensor::zeros(1, c.answer_vocab), true);
    }

    /// Marks every backbone tensor as frozen and records its digest.
    pub fn freeze(&self, store: &mut ParamStore) -> FrozenSnapshot {
        store.set_trainable_prefix(PREFIX, false);
        FrozenSnapshot::take(store)
    }

    /// `F_Q` (`l_Q x d`) and `F_V` (`regions x d`).
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<(Var, Var)> {
        let c = &self.config;
        if sample.question_tokens.len() != c.question_len {
            return Err(Error::Dimension {
                op: "embed",
                detail: format!("question of {} tokens, expected {}", sample.question_tokens.len(), c.question_len),
            });
        }
        if let Some(&id) = sample.question_tokens.iter().find(|t| **t >= c.token_vocab) {
            return Err(Error::Vocabulary { id, size: c.token_vocab });
        }
        if sample.vision_descriptor.len() != c.descriptor_dim {
            return Err(Error::Dimension {
                op: "embed",
                detail: format!("descriptor of {}, expected {}", sample.vision_descriptor.len(), c.descriptor_dim),
            });
        }
        let emb = g.param(store, &name("tok_emb"))?;
        let tok = g.gather_rows(emb, &sample.question_tokens)?;
        let pos_q = g.param(store, &name("pos_q"))?;
        let type_q = g.param(store, &name("type_q"))?;
        let fq = g.add(tok, pos_q)?;
        let fq = g.add_row(fq, type_q)?;

        let regions = g.constant(Tensor::matrix(c.regions, c.region_width(), sample.vision_descriptor.clone())?);
        let w = g.param(store, &name("stem_w"))?;
        let b = g.param(store, &name("stem_b"))?;
        let pos_v = g.param(store, &name("pos_v"))?;
        let type_v = g.param(store, &name("type_v"))?;
        let fv = g.matmul(regions, w)?;
        let fv = g.add_row(fv, b)?;
        let fv = g.add(fv, pos_v)?;
        let fv = g.add_row(fv, type_v)?;
        Ok((fq, fv))
    }

    /// Encoder pass with optional prompt injection, mean pooling and the
    /// answer head. Returns `1 x answer_vocab` logits.
    pub fn forward_with_prompts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fq: Var,
        fv: Var,
        prompts: Option<&TierPrompts>,
        injection: Injection,
    ) -> Result<Var> {
        let mut x = g.concat_rows(&[fq, fv])?;
        let n = g.shape(x).0;
        for (i, layer) in self.layers.iter().enumerate() {
            let idx = i + 1;
            let tier = if self.config.general_layers.contains(&idx) {
                Some(prompts.map(|p| p.general))
            } else if self.config.expert_layers.contains(&idx) {
                Some(prompts.map(|p| p.expert))
            } else {
                None
            };
            x = match tier {
                Some(Some((pq, pv))) => {
                    let input = g.concat_rows(&[pq, pv, x])?;
                    let np = g.shape(input).0 - n;
                    let mask: Option<Vec<bool>> = match injection {
                        Injection::Attend => None,
                        Injection::Masked => Some((0..np + n).map(|j| j >= np).collect()),
                    };
                    let out = layer.forward(g, store, input, input, input, mask.as_deref())?;
                    g.slice_rows(out, np, n)?
                }
                _ => layer.forward(g, store, x, x, x, None)?,
            };
        }
        let pooled = g.mean_rows(x)?;
        let w = g.param(store, &name("head_w"))?;
        let b = g.param(store, &name("head_b"))?;
        let logits = g.matmul(pooled, w)?;
        g.add_row(logits, b)
    }

    pub fn logits_values(&self, store: &ParamStore, sample: &Sample) -> Result<Tensor> {
        let mut g = Graph::new();
        let (fq, fv) = self.embed(&mut g, store, sample)?;
        let l = self.forward_with_prompts(&mut g, store, fq, fv, None, Injection::Attend)?;
        Ok(g.value(l).clone())
    }

    /// Trains every backbone tensor with minibatch SGD on mixed samples.
    /// Returns the mean loss of the last tenth of the steps.
    pub fn warm_up(
        &self,
        store: &mut ParamStore,
        samples: &[Sample],
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<f64> {
        if samples.is_empty() || batch == 0 {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tail = (steps / 10).max(1);
        let mut tail_loss = 0.0;
        for step in 0..steps {
            let mut grads = std::collections::BTreeMap::new();
            let mut batch_loss = 0.0;
            for _ in 0..batch {
                let s = &samples[rng.gen_range(0..samples.len())];
                let mut g = Graph::new();
                let (fq, fv) = self.embed(&mut g, store, s)?;
                let logits = self.forward_with_prompts(&mut g, store, fq, fv, None, Injection::Attend)?;
                let loss = ce_loss(&mut g, logits, s.label)?;
                batch_loss += g.value(loss).item();
                accumulate(&mut grads, g.backward(loss)?.params())?;
            }
            store.sgd_step(&grads, lr / batch as f64, 0.0, &[])?;
            if step + tail >= steps {
                tail_loss += batch_loss / batch as f64;
            }
        }
        Ok(tail_loss / tail.min(steps).max(1) as f64)
    }
}

/// `-log softmax(logits)[label]`.
pub fn ce_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let n = g.shape(logits).1;
    if label >= n {
        return Err(Error::Label { label, size: n });
    }
    let ls = g.log_softmax_rows(logits)?;
    let picked = g.gather_cols(ls, &[label])?;
    g.scale(picked, -1.0)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_stream, StreamConfig, DESCRIPTOR_DIM, QUESTION_LEN, REGIONS};

    fn setup() -> (Backbone, ParamStore, crate::taskgen::TaskStream) {
        let stream = generate_stream(&StreamConfig {
            train_per_task: 40,
            test_per_task: 20,
            ..StreamConfig::default()
        })
        .unwrap();
        let cfg = BackboneConfig {
            dim: 16,
            layers: 3,
            heads: 2,
            general_layers: vec![1],
            expert_layers: vec![2, 3],
            token_vocab: stream.tokens.size(),
            question_len: QUESTION_LEN,
            regions: REGIONS,
            descriptor_dim: DESCRIPTOR_DIM,
            answer_vocab: stream.answers.size(),
        };
        let b = Backbone::new(cfg).unwrap();
        let mut s = ParamStore::new();
        b.init(&mut s, &mut ChaCha8Rng::seed_from_u64(1));
        (b, s, stream)
    }

    #[test]
    fn embed_shapes_and_determinism() {
        let (b, s, stream) = setup();
        for x in stream.tasks.iter().flat_map(|t| &t.train).take(100) {
            let mut g = Graph::new();
            let (fq, fv) = b.embed(&mut g, &s, x).unwrap();
            assert_eq!(g.shape(fq), (QUESTION_LEN, 16));
            assert_eq!(g.shape(fv), (REGIONS, 16));
            let mut g2 = Graph::new();
            let (fq2, _) = b.embed(&mut g2, &s, x).unwrap();
            assert_eq!(g.value(fq), g2.value(fq2));
        }
    }

    #[test]
    fn unknown_token_is_rejected() {
        let (b, s, stream) = setup();
        let mut x = stream.tasks[0].train[0].clone();
        x.question_tokens[1] = 10_000;
        let mut g = Graph::new();
        assert!(matches!(b.embed(&mut g, &s, &x), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn masked_zero_prompts_equal_absent_prompts() {
        let (b, s, stream) = setup();
        let x = &stream.tasks[0].train[0];
        let mut g = Graph::new();
        let (fq, fv) = b.embed(&mut g, &s, x).unwrap();
        let absent = b.forward_with_prompts(&mut g, &s, fq, fv, None, Injection::Attend).unwrap();
        let z = g.constant(Tensor::zeros(1, 16));
        let p = TierPrompts { general: (z, z), expert: (z, z) };
        let masked = b.forward_with_prompts(&mut g, &s, fq, fv, Some(&p), Injection::Masked).unwrap();
        assert!(g.value(absent).max_abs_diff(g.value(masked)) < 1e-12);
        let attended = b.forward_with_prompts(&mut g, &s, fq, fv, Some(&p), Injection::Attend).unwrap();
        assert_eq!(g.shape(attended), (1, stream.answers.size()));
    }

    #[test]
    fn ce_loss_cases() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::zeros(1, 4));
        let l = ce_loss(&mut g, u, 2).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let peaked = g.constant(Tensor::row(vec![0.0, 100.0, 0.0]));
        let l = ce_loss(&mut g, peaked, 1).unwrap();
        assert!(g.value(l).item() < 1e-40);
        let r = Tensor::row(vec![0.3, -1.2, 2.5, 0.1]);
        let v = g.constant(r.clone());
        let l = ce_loss(&mut g, v, 3).unwrap();
        let lse = r.data().iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((g.value(l).item() - (lse - 0.1)).abs() < 1e-14);
        assert!(matches!(ce_loss(&mut g, v, 4), Err(Error::Label { .. })));
    }

    #[test]
    fn freezing_blocks_gradients_and_keeps_digest() {
        let (b, mut s, stream) = setup();
        let snap = b.freeze(&mut s);
        let x = &stream.tasks[0].train[0];
        let mut g = Graph::new();
        let (fq, fv) = b.embed(&mut g, &s, x).unwrap();
        let l = b.forward_with_prompts(&mut g, &s, fq, fv, None, Injection::Attend).unwrap();
        let loss = ce_loss(&mut g, l, x.label).unwrap();
        let grads = g.backward(loss).unwrap().params();
        assert!(grads.is_empty());
        s.sgd_step(&grads, 0.1, 0.0, &[]).unwrap();
        assert!(snap.matches(&s));
    }

    #[test]
    fn warm_up_reduces_loss() {
        let (b, mut s, stream) = setup();
        let samples: Vec<Sample> = stream.tasks.iter().flat_map(|t| t.train.clone()).collect();
        let before = b.warm_up(&mut s.clone(), &samples, 10, 8, 0.0, 3).unwrap();
        let after = b.warm_up(&mut s, &samples, 200, 8, 0.1, 3).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn overlapping_layers_rejected() {
        let (b, _, _) = setup();
        let mut c = b.config.clone();
        c.expert_layers = vec![1, 2];
        assert!(Backbone::new(c.clone()).is_err());
        c.expert_layers = vec![4];
        assert!(Backbone::new(c).is_err());
    }
}
