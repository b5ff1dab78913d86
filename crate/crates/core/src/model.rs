//! The full prompt-side model: queries, four pools, recovery per tier and
//! injection into the frozen backbone.

use rand::Rng;
use serde::Serialize;

use crate::backbone::{argmax, ce_loss, Backbone, Injection, TierPrompts};
use crate::cross_query::{build_queries, ModulationInit, QueryParams, QueryStrategy};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::prompt_store::{qk_align_loss, retrieve_from_pool, Modality, PromptPool, Retrieved, Tier};
use crate::recovery::{run_recovery, sample_mask, RecoveryParams, RecoveryToggles};
use crate::taskgen::Sample;

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    /// QG, QE, VG, VE.
    pub pools: [PromptPool; 4],
    pub query: QueryParams,
    pub recovery: RecoveryParams,
    pub toggles: RecoveryToggles,
    pub top_k: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Loss terms of one sample, both as graph nodes and values.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Var,
    pub total: Var,
    pub terms: LossTerms,
    pub inter_degenerate: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub ce: f64,
    pub qk_align: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.ce += o.ce;
        self.qk_align += o.qk_align;
        self.inter += o.inter;
        self.intra += o.intra;
        self.total += o.total;
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.ce *= c;
        self.qk_align *= c;
        self.inter *= c;
        self.intra *= c;
        self.total *= c;
        self
    }
}

/// Where the recovery masks come from.
#[derive(Debug, Clone, Copy)]
pub enum Masking {
    None,
    /// Mask seeds for the general and expert tier pairs.
    Seeds(u64, u64),
}

fn sum_opt(g: &mut Graph, parts: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for p in parts.iter().flatten() {
        acc = Some(match acc {
            None => *p,
            Some(a) => g.add(a, *p)?,
        });
    }
    Ok(acc)
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backbone: Backbone,
        pool_sizes: [usize; 4],
        top_k: usize,
        strategy: QueryStrategy,
        query_heads: usize,
        recovery: RecoveryParams,
        toggles: RecoveryToggles,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let d = backbone.config.dim;
        if recovery.dim != d {
            return Err(Error::Config(format!("recovery width {} vs model {d}", recovery.dim)));
        }
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::Config("recovery.alpha and recovery.beta must be non-negative".into()));
        }
        let mk = |i: usize, m, t| PromptPool::new(m, t, pool_sizes[i], d);
        let pools = [
            mk(0, Modality::Q, Tier::General)?,
            mk(1, Modality::Q, Tier::Expert)?,
            mk(2, Modality::V, Tier::General)?,
            mk(3, Modality::V, Tier::Expert)?,
        ];
        if let Some(p) = pools.iter().find(|p| p.size < top_k) {
            return Err(Error::Config(format!(
                "pool.top_k = {top_k} exceeds a pool of {}",
                p.size
            )));
        }
        if top_k == 0 {
            return Err(Error::Config("pool.top_k must be positive".into()));
        }
        Ok(Self {
            query: QueryParams::new(d, query_heads, strategy)?,
            backbone,
            pools,
            recovery,
            toggles,
            top_k,
            alpha,
            beta,
        })
    }

    /// Registers pool, query and recovery tensors (all trainable).
    pub fn init_prompt_side(&self, store: &mut ParamStore, w_init: ModulationInit, rng: &mut impl Rng) {
        for p in &self.pools {
            p.init(store, rng);
        }
        self.query.init(store, w_init, rng);
        self.recovery.init(store, rng);
    }

    /// Names of every tensor that receives gradients under the current
    /// toggles.
    pub fn learnable(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .pools
            .iter()
            .flat_map(|p| [p.keys_name(), p.prompts_name()])
            .collect();
        v.extend(self.query.active_params());
        if self.toggles.enabled {
            v.extend(self.recovery.param_names());
        }
        v
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &Sample,
        masking: Masking,
    ) -> Result<StepOutput> {
        let (fq, fv) = self.backbone.embed(g, store, sample)?;
        let (q_q, q_v) = build_queries(g, store, fq, fv, &self.query)?;
        let r: Vec<Retrieved> = self
            .pools
            .iter()
            .map(|p| {
                let q = if p.modality == Modality::Q { q_q } else { q_v };
                if g.value(q).norm() == 0.0 {
                    return Err(Error::DegenerateQuery);
                }
                retrieve_from_pool(g, store, p, q, self.top_k)
            })
            .collect::<Result<_>>()?;
        let d = self.recovery.dim;
        let masks = match masking {
            Masking::None => [None, None],
            Masking::Seeds(a, b) => [
                Some(sample_mask(d, self.recovery.delta, a)?),
                Some(sample_mask(d, self.recovery.delta, b)?),
            ],
        };
        let general = run_recovery(
            g,
            store,
            &self.recovery,
            r[0].aggregated,
            r[2].aggregated,
            masks[0].as_ref(),
            self.toggles,
        )?;
        let expert = run_recovery(
            g,
            store,
            &self.recovery,
            r[1].aggregated,
            r[3].aggregated,
            masks[1].as_ref(),
            self.toggles,
        )?;
        let prompts = TierPrompts {
            general: (general.p_final_q, general.p_final_v),
            expert: (expert.p_final_q, expert.p_final_v),
        };
        let logits = self
            .backbone
            .forward_with_prompts(g, store, fq, fv, Some(&prompts), Injection::Attend)?;
        let ce = ce_loss(g, logits, sample.label)?;
        let refs: Vec<&Retrieved> = r.iter().collect();
        let qk = qk_align_loss(g, &refs)?;
        let inter = sum_opt(g, &[general.loss_inter, expert.loss_inter])?;
        let intra = sum_opt(g, &[general.loss_intra, expert.loss_intra])?;

        let mut total = g.add(ce, qk)?;
        let mut terms = LossTerms {
            ce: g.value(ce).item(),
            qk_align: g.value(qk).item(),
            ..LossTerms::default()
        };
        if let Some(l) = inter {
            terms.inter = g.value(l).item();
            let w = g.scale(l, self.alpha)?;
            total = g.add(total, w)?;
        }
        if let Some(l) = intra {
            terms.intra = g.value(l).item();
            let w = g.scale(l, self.beta)?;
            total = g.add(total, w)?;
        }
        terms.total = g.value(total).item();
        Ok(StepOutput {
            logits,
            total,
            terms,
            inter_degenerate: general.bundle.inter_degenerate || expert.bundle.inter_degenerate,
        })
    }

    pub fn logits(&self, store: &ParamStore, sample: &Sample) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, sample, Masking::None)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn predict(&self, store: &ParamStore, sample: &Sample) -> Result<usize> {
        Ok(argmax(self.logits(store, sample)?.data()))
    }
}
