//! Multi-run orchestration: ablation arms, sweeps, task-order studies and
//! the gradient check used by the command line.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::{prepare, run_experiment, RunReport};
use crate::config::RunConfig;
use crate::cross_query::QueryStrategy;
use crate::error::{Error, Result};
use crate::model::Masking;
use crate::numerics::{grad_check_params, GradCheckReport};

/// Named model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Arm {
    /// Independent per-modality queries, no recovery.
    Isolated,
    /// Cross-modal query only.
    CrossQuery,
    /// Cross-modal query plus both recovery phases.
    Full,
    IntraOnly,
    InterOnly,
    /// Full recovery with the inter-modal alignment loss off.
    NoInterLoss,
    /// Full recovery with the intra-modal alignment loss off.
    NoIntraLoss,
    /// Full recovery with an alternative fusion in place of the cross query.
    Fusion(QueryStrategy),
}

impl Arm {
    pub const GRID: [Arm; 3] = [Arm::Isolated, Arm::CrossQuery, Arm::Full];
    pub const PHASES: [Arm; 3] = [Arm::IntraOnly, Arm::InterOnly, Arm::Full];

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.enable_cross_query = true;
        c.strategy = QueryStrategy::CrossQuery;
        c.enable_recovery = true;
        c.enable_intra = true;
        c.enable_inter = true;
        c.enable_intra_loss = true;
        c.enable_inter_loss = true;
        match self {
            Arm::Isolated => {
                c.enable_cross_query = false;
                c.enable_recovery = false;
            }
            Arm::CrossQuery => c.enable_recovery = false,
            Arm::Full => {}
            Arm::IntraOnly => c.enable_inter = false,
            Arm::InterOnly => c.enable_intra = false,
            Arm::NoInterLoss => c.enable_inter_loss = false,
            Arm::NoIntraLoss => c.enable_intra_loss = false,
            Arm::Fusion(s) => c.strategy = s,
        }
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Isolated => f.write_str("isolated"),
            Arm::CrossQuery => f.write_str("cq"),
            Arm::Full => f.write_str("full"),
            Arm::IntraOnly => f.write_str("intra_only"),
            Arm::InterOnly => f.write_str("inter_only"),
            Arm::NoInterLoss => f.write_str("no_inter_loss"),
            Arm::NoIntraLoss => f.write_str("no_intra_loss"),
            Arm::Fusion(s) => write!(f, "fusion_{s}"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "isolated" => Arm::Isolated,
            "cq" => Arm::CrossQuery,
            "full" => Arm::Full,
            "intra_only" => Arm::IntraOnly,
            "inter_only" => Arm::InterOnly,
            "no_inter_loss" => Arm::NoInterLoss,
            "no_intra_loss" => Arm::NoIntraLoss,
            other => match other.strip_prefix("fusion_") {
                Some(q) => Arm::Fusion(q.parse()?),
                None => {
                    return Err(Error::Config(format!(
                        "unknown arm '{s}' (expected isolated, cq, full, intra_only, inter_only, \
                         no_inter_loss, no_intra_loss or fusion_<strategy>)"
                    )))
                }
            },
        })
    }
}

/// Runs every config on a pool of `jobs` threads; results keep input order.
pub fn run_many(configs: &[RunConfig], jobs: usize) -> Vec<Result<RunReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| configs.par_iter().map(run_experiment).collect())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
}

/// One row of a multi-run table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    pub seed: u64,
    pub avg_performance: f64,
    pub inter_forgetting: Option<f64>,
    pub intra_forgetting: Option<f64>,
    pub merge_effectiveness: Option<f64>,
    pub modality_difference: Option<f64>,
}

impl Row {
    pub fn from_report(label: impl Into<String>, seed: u64, r: &RunReport) -> Self {
        Self {
            label: label.into(),
            seed,
            avg_performance: r.metrics.avg_performance,
            inter_forgetting: r.metrics.inter_forgetting,
            intra_forgetting: r.metrics.intra_forgetting,
            merge_effectiveness: r.metrics.final_merge_effectiveness,
            modality_difference: r.metrics.final_modality_difference,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub const ROW_HEADER: &str = "label,seed,A,F_inter,F_intra,ME,MD";

pub fn rows_csv(rows: &[Row]) -> String {
    let mut s = format!("{ROW_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.seed,
            r.avg_performance,
            opt(r.inter_forgetting),
            opt(r.intra_forgetting),
            opt(r.merge_effectiveness),
            opt(r.modality_difference)
        ));
    }
    s
}

/// Per-label medians over seeds, labels in first-appearance order.
pub fn medians(rows: &[Row]) -> Vec<Row> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let med = |xs: Vec<Option<f64>>| -> Option<f64> {
        let v: Option<Vec<f64>> = xs.into_iter().collect();
        v.and_then(|v| median(&v))
    };
    labels
        .into_iter()
        .map(|l| {
            let g: Vec<&Row> = rows.iter().filter(|r| r.label == l).collect();
            Row {
                label: l.to_string(),
                seed: g.len() as u64,
                avg_performance: median(&g.iter().map(|r| r.avg_performance).collect::<Vec<_>>())
                    .unwrap_or(f64::NAN),
                inter_forgetting: med(g.iter().map(|r| r.inter_forgetting).collect()),
                intra_forgetting: med(g.iter().map(|r| r.intra_forgetting).collect()),
                merge_effectiveness: med(g.iter().map(|r| r.merge_effectiveness).collect()),
                modality_difference: med(g.iter().map(|r| r.modality_difference).collect()),
            }
        })
        .collect()
}

fn collect(labelled: Vec<(String, u64)>, results: Vec<Result<RunReport>>) -> Result<Vec<Row>> {
    labelled
        .into_iter()
        .zip(results)
        .map(|((l, s), r)| r.map(|r| Row::from_report(l, s, &r)))
        .collect()
}

/// Every arm for every seed.
pub fn ablate(base: &RunConfig, arms: &[Arm], seeds: &[u64], jobs: usize) -> Result<Vec<Row>> {
    let mut configs = Vec::new();
    let mut labels = Vec::new();
    for arm in arms {
        for &seed in seeds {
            let mut c = arm.apply(base);
            c.seed = seed;
            c.validate()?;
            configs.push(c);
            labels.push((arm.to_string(), seed));
        }
    }
    collect(labels, run_many(&configs, jobs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    Delta,
    Alpha,
    Beta,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Delta => "recovery.delta",
            SweepParam::Alpha => "recovery.alpha",
            SweepParam::Beta => "recovery.beta",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepParam::Delta),
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::Config(format!("unknown sweep parameter '{s}' (expected delta, alpha or beta)"))),
        }
    }
}

/// One run per value per seed; rows are sorted by value, then seed.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64], seeds: &[u64], jobs: usize) -> Result<Vec<Row>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("sweep values"));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut configs = Vec::new();
    let mut labels = Vec::new();
    for v in &values {
        for &seed in seeds {
            let mut c = base.clone();
            c.set(param.key(), &v.to_string())?;
            c.seed = seed;
            c.validate()?;
            configs.push(c);
            labels.push((v.to_string(), seed));
        }
    }
    collect(labels, run_many(&configs, jobs))
}

/// Order seeds for an `n`-order study: the identity first, then `1..n`.
pub fn order_seeds(n: usize) -> Vec<Option<u64>> {
    (0..n).map(|i| if i == 0 { None } else { Some(i as u64) }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderRow {
    pub arm: String,
    pub order: Vec<usize>,
    pub avg_performance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    /// Across-order standard deviation of A per arm.
    pub std: Vec<(String, f64)>,
}

impl OrderStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,order,A\n");
        for r in &self.rows {
            let order: Vec<String> = r.order.iter().map(|t| (t + 1).to_string()).collect();
            s.push_str(&format!("{},{},{}\n", r.arm, order.join("-"), r.avg_performance));
        }
        s
    }
}

/// Runs `arms` on `n` task orders of the stream generated by `base.seed`.
pub fn orders(base: &RunConfig, arms: &[Arm], n: usize, jobs: usize) -> Result<OrderStudy> {
    if n < 2 {
        return Err(Error::Config(format!("orders needs at least 2 permutations, got {n}")));
    }
    let mut configs = Vec::new();
    let mut labels = Vec::new();
    for arm in arms {
        for o in order_seeds(n) {
            let mut c = arm.apply(base);
            c.order_seed = o;
            c.validate()?;
            configs.push(c);
            labels.push(arm.to_string());
        }
    }
    let mut rows = Vec::new();
    for (l, r) in labels.into_iter().zip(run_many(&configs, jobs)) {
        let r = r?;
        rows.push(OrderRow {
            arm: l,
            order: r.task_order.clone(),
            avg_performance: r.metrics.avg_performance,
        });
    }
    let std = arms
        .iter()
        .map(|a| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == a.to_string())
                .map(|r| r.avg_performance)
                .collect();
            (a.to_string(), std_dev(&v).unwrap_or(0.0))
        })
        .collect();
    Ok(OrderStudy { rows, std })
}

/// Small configuration for whole-model gradient checks.
pub fn gradcheck_config() -> RunConfig {
    RunConfig {
        n_tasks: 2,
        train_per_task: 40,
        test_per_task: 8,
        dim: 8,
        layers: 3,
        heads: 2,
        general_layers: vec![1],
        expert_layers: vec![2],
        warmup_steps: 10,
        warmup_batch: 4,
        warmup_samples: 64,
        pool_sizes: [6, 7, 8, 9],
        top_k: 3,
        query_heads: 2,
        token_view: 2,
        delta: 0.25,
        ..RunConfig::default()
    }
}

/// Checks gradients of the total objective for one training sample with
/// respect to every learnable tensor.
pub fn gradient_check(cfg: &RunConfig, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    let prep = prepare(cfg)?;
    let x = prep.stream.tasks[0].train[0].clone();
    let names = prep.model.learnable();
    grad_check_params(&prep.store, &names, epsilon, tolerance, |s, g| {
        Ok(prep.model.forward(g, s, &x, Masking::Seeds(cfg.seed, cfg.seed + 1))?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for a in [
            Arm::Isolated,
            Arm::CrossQuery,
            Arm::Full,
            Arm::IntraOnly,
            Arm::InterOnly,
            Arm::NoInterLoss,
            Arm::NoIntraLoss,
            Arm::Fusion(QueryStrategy::Hadamard),
        ] {
            assert_eq!(a.to_string().parse::<Arm>().unwrap(), a);
        }
        assert!("bogus".parse::<Arm>().is_err());
    }

    #[test]
    fn arms_set_toggles() {
        let b = RunConfig::default();
        let iso = Arm::Isolated.apply(&b);
        assert_eq!(iso.query_strategy(), QueryStrategy::Isolated);
        assert!(!iso.toggles().enabled);
        let intra = Arm::IntraOnly.apply(&b);
        assert!(intra.toggles().intra && !intra.toggles().inter);
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(std_dev(&[2.0, 4.0]), Some(1.0));
    }

    #[test]
    fn gradient_check_passes_on_small_model() {
        let r = gradient_check(&gradcheck_config(), 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.worst);
        assert!(r.params.iter().any(|p| p.starts_with("query.")));
        assert!(r.params.iter().any(|p| p.starts_with("recovery.")));
    }
}
