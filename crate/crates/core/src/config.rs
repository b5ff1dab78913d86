//! Run configuration as flat dotted keys.
//!
//! Files hold `key = value` lines, optionally grouped under `[section]`
//! headers so that `delta = 0.1` under `[recovery]` means
//! `recovery.delta = 0.1`. `#` starts a comment. Unknown keys are errors.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cross_query::{ModulationInit, QueryStrategy};
use crate::error::{Error, Result};
use crate::recovery::RecoveryToggles;
use crate::taskgen::{DegradeMode, Setting, StreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Joint,
    VOnly,
    QOnly,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Joint => "joint",
            EvalMode::VOnly => "v_only",
            EvalMode::QOnly => "q_only",
        }
    }

    pub fn degrade(self) -> Option<DegradeMode> {
        match self {
            EvalMode::Joint => None,
            EvalMode::VOnly => Some(DegradeMode::VOnly),
            EvalMode::QOnly => Some(DegradeMode::QOnly),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(EvalMode::Joint),
            "v_only" => Ok(EvalMode::VOnly),
            "q_only" => Ok(EvalMode::QOnly),
            o => Err(Error::Config(format!("unknown eval mode '{o}' (joint, v_only, q_only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,

    pub setting: Setting,
    pub n_tasks: usize,
    pub n_classes: usize,
    pub n_question_types: usize,
    pub n_subtasks: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub noise: f64,
    pub typicality: f64,
    pub distractor_tasks: usize,
    pub distractor_strength: f64,
    /// Applied to the generated stream before training; `None` keeps it.
    pub order_seed: Option<u64>,

    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub general_layers: Vec<usize>,
    pub expert_layers: Vec<usize>,
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
    pub warmup_samples: usize,

    pub pool_sizes: [usize; 4],
    pub top_k: usize,

    pub enable_cross_query: bool,
    pub strategy: QueryStrategy,
    pub w_init: ModulationInit,
    pub query_heads: usize,

    pub enable_recovery: bool,
    pub enable_intra: bool,
    pub enable_inter: bool,
    pub enable_intra_loss: bool,
    pub enable_inter_loss: bool,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub token_view: usize,
    pub recovery_heads: usize,
    pub weight_decay: f64,

    pub lr: f64,
    pub steps_per_task: usize,
    pub batch: usize,
    pub replay_size: usize,
    /// Share of each minibatch drawn from the replay buffer once it has data.
    pub replay_fraction: f64,

    pub eval_modes: Vec<EvalMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StreamConfig::default();
        Self {
            seed: 1,
            setting: s.setting,
            n_tasks: s.n_tasks,
            n_classes: s.n_classes,
            n_question_types: s.n_question_types,
            n_subtasks: s.n_subtasks,
            train_per_task: s.train_per_task,
            test_per_task: s.test_per_task,
            noise: s.noise_level,
            typicality: s.typicality,
            distractor_tasks: s.distractor_tasks,
            distractor_strength: s.distractor_strength,
            order_seed: None,
            dim: 32,
            layers: 6,
            heads: 4,
            general_layers: vec![1, 2],
            expert_layers: vec![3, 4, 5],
            warmup_steps: 300,
            warmup_batch: 16,
            warmup_lr: 0.05,
            warmup_samples: 2000,
            pool_sizes: [40, 60, 80, 120],
            top_k: 5,
            enable_cross_query: true,
            strategy: QueryStrategy::CrossQuery,
            w_init: ModulationInit::Ones,
            query_heads: 4,
            enable_recovery: true,
            enable_intra: true,
            enable_inter: true,
            enable_intra_loss: true,
            enable_inter_loss: true,
            delta: 0.05,
            alpha: 1.0,
            beta: 0.3,
            token_view: 4,
            recovery_heads: 1,
            weight_decay: 1e-4,
            lr: 0.05,
            steps_per_task: 150,
            batch: 8,
            replay_size: 0,
            replay_fraction: 0.5,
            eval_modes: vec![EvalMode::Joint, EvalMode::VOnly, EvalMode::QOnly],
        }
    }
}

/// Every accepted key, in display order.
pub const KEYS: &[&str] = &[
    "run.seed",
    "taskgen.setting",
    "taskgen.n_tasks",
    "taskgen.n_classes",
    "taskgen.n_question_types",
    "taskgen.n_subtasks",
    "taskgen.train_per_task",
    "taskgen.test_per_task",
    "taskgen.noise",
    "taskgen.typicality",
    "taskgen.distractor_tasks",
    "taskgen.distractor_strength",
    "taskgen.order_seed",
    "backbone.dim",
    "backbone.layers",
    "backbone.heads",
    "backbone.general_layers",
    "backbone.expert_layers",
    "backbone.warmup_steps",
    "backbone.warmup_batch",
    "backbone.warmup_lr",
    "backbone.warmup_samples",
    "pool.qg",
    "pool.qe",
    "pool.vg",
    "pool.ve",
    "pool.top_k",
    "query.enable_cross_query",
    "query.strategy",
    "query.w_init",
    "query.heads",
    "recovery.enable",
    "recovery.enable_intra",
    "recovery.enable_inter",
    "recovery.enable_intra_loss",
    "recovery.enable_inter_loss",
    "recovery.delta",
    "recovery.alpha",
    "recovery.beta",
    "recovery.token_view",
    "recovery.heads",
    "recovery.weight_decay",
    "train.lr",
    "train.steps_per_task",
    "train.batch",
    "train.replay_size",
    "train.replay_fraction",
    "eval.modes",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn range_err(key: &str, v: impl std::fmt::Display, range: &str) -> Error {
    Error::Config(format!("{key} = {v} is outside the valid range {range}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "taskgen.setting" => self.setting = v.parse()?,
            "taskgen.n_tasks" => self.n_tasks = parse(key, v)?,
            "taskgen.n_classes" => self.n_classes = parse(key, v)?,
            "taskgen.n_question_types" => self.n_question_types = parse(key, v)?,
            "taskgen.n_subtasks" => self.n_subtasks = parse(key, v)?,
            "taskgen.train_per_task" => self.train_per_task = parse(key, v)?,
            "taskgen.test_per_task" => self.test_per_task = parse(key, v)?,
            "taskgen.noise" => self.noise = parse(key, v)?,
            "taskgen.typicality" => self.typicality = parse(key, v)?,
            "taskgen.distractor_tasks" => self.distractor_tasks = parse(key, v)?,
            "taskgen.distractor_strength" => self.distractor_strength = parse(key, v)?,
            "taskgen.order_seed" => {
                self.order_seed = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "backbone.dim" => self.dim = parse(key, v)?,
            "backbone.layers" => self.layers = parse(key, v)?,
            "backbone.heads" => self.heads = parse(key, v)?,
            "backbone.general_layers" => self.general_layers = parse_list(key, v)?,
            "backbone.expert_layers" => self.expert_layers = parse_list(key, v)?,
            "backbone.warmup_steps" => self.warmup_steps = parse(key, v)?,
            "backbone.warmup_batch" => self.warmup_batch = parse(key, v)?,
            "backbone.warmup_lr" => self.warmup_lr = parse(key, v)?,
            "backbone.warmup_samples" => self.warmup_samples = parse(key, v)?,
            "pool.qg" => self.pool_sizes[0] = parse(key, v)?,
            "pool.qe" => self.pool_sizes[1] = parse(key, v)?,
            "pool.vg" => self.pool_sizes[2] = parse(key, v)?,
            "pool.ve" => self.pool_sizes[3] = parse(key, v)?,
            "pool.top_k" => self.top_k = parse(key, v)?,
            "query.enable_cross_query" => self.enable_cross_query = parse_bool(key, v)?,
            "query.strategy" => self.strategy = v.parse()?,
            "query.w_init" => self.w_init = v.parse()?,
            "query.heads" => self.query_heads = parse(key, v)?,
            "recovery.enable" => self.enable_recovery = parse_bool(key, v)?,
            "recovery.enable_intra" => self.enable_intra = parse_bool(key, v)?,
            "recovery.enable_inter" => self.enable_inter = parse_bool(key, v)?,
            "recovery.enable_intra_loss" => self.enable_intra_loss = parse_bool(key, v)?,
            "recovery.enable_inter_loss" => self.enable_inter_loss = parse_bool(key, v)?,
            "recovery.delta" => self.delta = parse(key, v)?,
            "recovery.alpha" => self.alpha = parse(key, v)?,
            "recovery.beta" => self.beta = parse(key, v)?,
            "recovery.token_view" => self.token_view = parse(key, v)?,
            "recovery.heads" => self.recovery_heads = parse(key, v)?,
            "recovery.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.steps_per_task" => self.steps_per_task = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.replay_size" => self.replay_size = parse(key, v)?,
            "train.replay_fraction" => self.replay_fraction = parse(key, v)?,
            "eval.modes" => self.eval_modes = parse_list(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}'; valid keys are: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "run.seed" => self.seed.to_string(),
            "taskgen.setting" => self.setting.to_string(),
            "taskgen.n_tasks" => self.n_tasks.to_string(),
            "taskgen.n_classes" => self.n_classes.to_string(),
            "taskgen.n_question_types" => self.n_question_types.to_string(),
            "taskgen.n_subtasks" => self.n_subtasks.to_string(),
            "taskgen.train_per_task" => self.train_per_task.to_string(),
            "taskgen.test_per_task" => self.test_per_task.to_string(),
            "taskgen.noise" => self.noise.to_string(),
            "taskgen.typicality" => self.typicality.to_string(),
            "taskgen.distractor_tasks" => self.distractor_tasks.to_string(),
            "taskgen.distractor_strength" => self.distractor_strength.to_string(),
            "taskgen.order_seed" => self.order_seed.map_or("none".into(), |s| s.to_string()),
            "backbone.dim" => self.dim.to_string(),
            "backbone.layers" => self.layers.to_string(),
            "backbone.heads" => self.heads.to_string(),
            "backbone.general_layers" => join(&self.general_layers),
            "backbone.expert_layers" => join(&self.expert_layers),
            "backbone.warmup_steps" => self.warmup_steps.to_string(),
            "backbone.warmup_batch" => self.warmup_batch.to_string(),
            "backbone.warmup_lr" => self.warmup_lr.to_string(),
            "backbone.warmup_samples" => self.warmup_samples.to_string(),
            "pool.qg" => self.pool_sizes[0].to_string(),
            "pool.qe" => self.pool_sizes[1].to_string(),
            "pool.vg" => self.pool_sizes[2].to_string(),
            "pool.ve" => self.pool_sizes[3].to_string(),
            "pool.top_k" => self.top_k.to_string(),
            "query.enable_cross_query" => self.enable_cross_query.to_string(),
            "query.strategy" => self.strategy.to_string(),
            "query.w_init" => self.w_init.to_string(),
            "query.heads" => self.query_heads.to_string(),
            "recovery.enable" => self.enable_recovery.to_string(),
            "recovery.enable_intra" => self.enable_intra.to_string(),
            "recovery.enable_inter" => self.enable_inter.to_string(),
            "recovery.enable_intra_loss" => self.enable_intra_loss.to_string(),
            "recovery.enable_inter_loss" => self.enable_inter_loss.to_string(),
            "recovery.delta" => self.delta.to_string(),
            "recovery.alpha" => self.alpha.to_string(),
            "recovery.beta" => self.beta.to_string(),
            "recovery.token_view" => self.token_view.to_string(),
            "recovery.heads" => self.recovery_heads.to_string(),
            "recovery.weight_decay" => self.weight_decay.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.steps_per_task" => self.steps_per_task.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.replay_size" => self.replay_size.to_string(),
            "train.replay_fraction" => self.replay_fraction.to_string(),
            "eval.modes" => self.eval_modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            _ => return None,
        })
    }

    /// All keys with their current values.
    pub fn entries(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// Applies a config file body on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = s.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            self.set(&key, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Renders the config as a file that [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in KEYS {
            let (s, name) = k.split_once('.').expect("dotted key");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{name} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(range_err("recovery.delta", self.delta, "[0, 1]"));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(range_err("recovery.alpha", self.alpha, "[0, inf)"));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(range_err("recovery.beta", self.beta, "[0, inf)"));
        }
        if self.weight_decay < 0.0 {
            return Err(range_err("recovery.weight_decay", self.weight_decay, "[0, inf)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(range_err("train.lr", self.lr, "(0, inf)"));
        }
        if self.batch == 0 {
            return Err(range_err("train.batch", self.batch, "[1, inf)"));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(range_err("train.replay_fraction", self.replay_fraction, "[0, 1]"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.dim = {} must be divisible by backbone.heads = {}",
                self.dim, self.heads
            )));
        }
        if self.query_heads == 0 || self.dim % self.query_heads != 0 {
            return Err(Error::Config(format!(
                "query.heads = {} must divide backbone.dim = {}",
                self.query_heads, self.dim
            )));
        }
        if self.token_view == 0 || self.dim % self.token_view != 0 {
            return Err(Error::Config(format!(
                "recovery.token_view = {} must divide backbone.dim = {}",
                self.token_view, self.dim
            )));
        }
        let w = self.dim / self.token_view;
        if self.recovery_heads == 0 || w % self.recovery_heads != 0 {
            return Err(Error::Config(format!(
                "recovery.heads = {} must divide the token width {w}",
                self.recovery_heads
            )));
        }
        if self.top_k == 0 || self.pool_sizes.iter().any(|p| *p < self.top_k) {
            return Err(Error::Config(format!(
                "pool.top_k = {} must be in [1, smallest pool size {}]",
                self.top_k,
                self.pool_sizes.iter().min().copied().unwrap_or(0)
            )));
        }
        if self.eval_modes.is_empty() {
            return Err(Error::Config("eval.modes must list at least one mode".into()));
        }
        self.stream_config().validate()
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            setting: self.setting,
            n_tasks: self.n_tasks,
            n_classes: self.n_classes,
            n_question_types: self.n_question_types,
            n_subtasks: self.n_subtasks,
            train_per_task: self.train_per_task,
            test_per_task: self.test_per_task,
            noise_level: self.noise,
            typicality: self.typicality,
            distractor_tasks: self.distractor_tasks,
            distractor_strength: self.distractor_strength,
            seed: self.seed,
        }
    }

    pub fn query_strategy(&self) -> QueryStrategy {
        if self.enable_cross_query {
            self.strategy
        } else {
            QueryStrategy::Isolated
        }
    }

    pub fn toggles(&self) -> RecoveryToggles {
        RecoveryToggles {
            enabled: self.enable_recovery,
            intra: self.enable_intra,
            inter: self.enable_inter,
            intra_loss: self.enable_intra_loss,
            inter_loss: self.enable_inter_loss,
        }
    }
}
