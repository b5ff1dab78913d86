//! Continual training, evaluation and reporting.

pub mod checkpoint;
pub mod grid;
pub mod metrics;
pub mod replay;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, FrozenSnapshot, PREFIX as BACKBONE_PREFIX};
use crate::config::{EvalMode, RunConfig};
use crate::error::{Error, Result};
use crate::model::{LossTerms, Masking, Model};
use crate::numerics::{accumulate, ParamStore};
use crate::recovery::{RecoveryParams, DECAY_PREFIX};
use crate::taskgen::{
    degrade_modality, generate_stream, permute_order, warmup_samples, Sample, TaskStream, DESCRIPTOR_DIM,
    QUESTION_LEN, REGIONS,
};

pub use metrics::{
    avg_performance, compute_metrics, inter_forgetting, inter_forgetting_all_checkpoints, intra_forgetting,
    merge_effectiveness, modality_difference, AccuracyMatrix, Metrics,
};
pub use replay::{AccessEntry, AccessLog, ReplayBuffer};
pub use report::{write_outputs, Manifest, ManifestEntry, RunReport, Timing};

const BACKBONE_SALT: u64 = 0x6261_636b_626f_6e65;
const WARMUP_SALT: u64 = 0x7761_726d_7570_0001;
const PROMPT_SALT: u64 = 0x7072_6f6d_7074_0002;
const TRAIN_SALT: u64 = 0x7472_6169_6e00_0003;

/// `ce + qk_align + alpha * l_inter + beta * l_intra`.
pub fn total_loss(ce: f64, qk_align: f64, l_inter: f64, l_intra: f64, alpha: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("ce", ce), ("qk_align", qk_align), ("l_inter", l_inter), ("l_intra", l_intra)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: format!("total_loss component {name}"),
            });
        }
    }
    Ok(ce + qk_align + alpha * l_inter + beta * l_intra)
}

/// Stream, model and a store holding the frozen backbone plus freshly
/// initialized prompt-side tensors.
pub struct Prepared {
    pub stream: TaskStream,
    pub model: Model,
    pub store: ParamStore,
    pub snapshot: FrozenSnapshot,
    pub warmup_loss: f64,
    pub warmup_seconds: f64,
}

fn backbone_config(cfg: &RunConfig, stream: &TaskStream) -> BackboneConfig {
    BackboneConfig {
        dim: cfg.dim,
        layers: cfg.layers,
        heads: cfg.heads,
        general_layers: cfg.general_layers.clone(),
        expert_layers: cfg.expert_layers.clone(),
        token_vocab: stream.tokens.size(),
        question_len: QUESTION_LEN,
        regions: REGIONS,
        descriptor_dim: DESCRIPTOR_DIM,
        answer_vocab: stream.answers.size(),
    }
}

type WarmCache = Mutex<HashMap<String, (ParamStore, f64)>>;

fn warm_cache() -> &'static WarmCache {
    static CACHE: OnceLock<WarmCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Drops every cached warm-up result.
pub fn clear_warmup_cache() {
    warm_cache().lock().expect("cache lock").clear();
}

/// Initializes and warms up the backbone. Results are cached per process,
/// keyed by everything that influences them, so ablation arms sharing a
/// seed share one backbone.
pub fn warmed_backbone(cfg: &RunConfig, stream: &TaskStream, backbone: &Backbone) -> Result<(ParamStore, f64)> {
    let key = serde_json::to_string(&(
        &stream.config,
        &backbone.config,
        cfg.warmup_steps,
        cfg.warmup_batch,
        cfg.warmup_lr.to_bits(),
        cfg.warmup_samples,
    ))
    .map_err(|e| Error::Io(e.to_string()))?;
    if let Some(hit) = warm_cache().lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let mut store = ParamStore::new();
    backbone.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ BACKBONE_SALT));
    let data = warmup_samples(stream, cfg.warmup_samples, cfg.seed ^ WARMUP_SALT)?;
    let loss = backbone.warm_up(
        &mut store,
        &data,
        cfg.warmup_steps,
        cfg.warmup_batch,
        cfg.warmup_lr,
        cfg.seed ^ WARMUP_SALT,
    )?;
    backbone.freeze(&mut store);
    warm_cache()
        .lock()
        .expect("cache lock")
        .insert(key, (store.clone(), loss));
    Ok((store, loss))
}

pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let stream = generate_stream(&cfg.stream_config())?;
    match cfg.order_seed {
        Some(s) => permute_order(&stream, s),
        None => Ok(stream),
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let backbone = Backbone::new(backbone_config(cfg, &stream))?;
    let t0 = Instant::now();
    let (mut store, warmup_loss) = warmed_backbone(cfg, &stream, &backbone)?;
    let warmup_seconds = t0.elapsed().as_secs_f64();
    let snapshot = FrozenSnapshot::take(&store);
    let recovery = RecoveryParams::new(cfg.dim, cfg.token_view, cfg.recovery_heads, cfg.delta)?;
    let model = Model::new(
        backbone,
        cfg.pool_sizes,
        cfg.top_k,
        cfg.query_strategy(),
        cfg.query_heads,
        recovery,
        cfg.toggles(),
        cfg.alpha,
        cfg.beta,
    )?;
    model.init_prompt_side(&mut store, cfg.w_init, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ PROMPT_SALT));
    Ok(Prepared {
        stream,
        model,
        store,
        snapshot,
        warmup_loss,
        warmup_seconds,
    })
}

/// Mutable training state threaded through the tasks.
pub struct TrainState {
    pub store: ParamStore,
    pub replay: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub log: AccessLog,
    pub curve: Vec<LossTerms>,
    pub degenerate_inter: usize,
}

impl TrainState {
    pub fn new(store: ParamStore, cfg: &RunConfig) -> Self {
        Self {
            store,
            replay: ReplayBuffer::new(cfg.replay_size),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_SALT),
            log: AccessLog::default(),
            curve: Vec::new(),
            degenerate_inter: 0,
        }
    }
}

fn with_context(e: Error, task: usize, step: usize) -> Error {
    match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{op} (task {}, step {})", task + 1, step + 1),
        },
        other => other,
    }
}

/// Runs `steps` SGD steps on `samples`, the training data of the task at
/// stream position `position`, mixing in replayed samples when the buffer
/// holds any.
pub fn train_steps(
    model: &Model,
    state: &mut TrainState,
    samples: &[&Sample],
    position: usize,
    stream: &TaskStream,
    cfg: &RunConfig,
    steps: usize,
) -> Result<()> {
    if samples.is_empty() || steps == 0 {
        return Ok(());
    }
    let position_of = |task_id: usize| stream.tasks.iter().position(|t| t.id == task_id);
    let n_replay = if state.replay.is_empty() {
        0
    } else {
        ((cfg.batch as f64) * cfg.replay_fraction).round() as usize
    };
    for step in 0..steps {
        let mut grads = BTreeMap::new();
        let mut terms = LossTerms::default();
        let mut entry = AccessEntry {
            task_position: position,
            step,
            current: 0,
            replayed: 0,
            from_earlier_tasks: 0,
        };
        for i in 0..cfg.batch {
            let x = if i < n_replay {
                entry.replayed += 1;
                state.replay.sample(&mut state.rng).expect("non-empty buffer")
            } else {
                entry.current += 1;
                samples[state.rng.gen_range(0..samples.len())]
            };
            if position_of(x.task_id).is_some_and(|p| p < position) {
                entry.from_earlier_tasks += 1;
            }
            let masking = Masking::Seeds(state.rng.gen(), state.rng.gen());
            let mut g = crate::numerics::Graph::new();
            let out = model
                .forward(&mut g, &state.store, x, masking)
                .map_err(|e| with_context(e, position, step))?;
            terms.add(&out.terms);
            state.degenerate_inter += usize::from(out.inter_degenerate);
            let gr = g.backward(out.total).map_err(|e| with_context(e, position, step))?;
            accumulate(&mut grads, gr.params())?;
        }
        state
            .store
            .sgd_step(&grads, cfg.lr / cfg.batch as f64, cfg.weight_decay, &[DECAY_PREFIX])
            .map_err(|e| with_context(e, position, step))?;
        for p in &model.pools {
            p.renormalize_keys(&mut state.store)?;
        }
        state.curve.push(terms.scaled(1.0 / cfg.batch as f64));
        state.log.entries.push(entry);
    }
    Ok(())
}

/// Prompt-side snapshots taken during training.
#[derive(Debug, Clone, Default)]
pub struct Checkpoints {
    /// After each task, in stream order.
    pub tasks: Vec<ParamStore>,
    /// `subtasks[task][s]`: after subtask `s` of that task (DI only).
    pub subtasks: Vec<Vec<ParamStore>>,
}

fn prompt_side(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in store.iter().filter(|(n, _)| !n.starts_with(BACKBONE_PREFIX)) {
        out.insert(name, p.value.as_ref().clone(), p.trainable);
    }
    out
}

/// Trains one task (its subtasks in order) and updates the replay buffer.
pub fn train_task(
    model: &Model,
    state: &mut TrainState,
    stream: &TaskStream,
    position: usize,
    cfg: &RunConfig,
    checkpoints: &mut Checkpoints,
) -> Result<()> {
    let task = &stream.tasks[position];
    let n_sub = task.n_subtasks();
    let mut subs = Vec::new();
    for s in 0..n_sub {
        let samples: Vec<&Sample> = task.train_subtask(s).collect();
        let steps = cfg.steps_per_task / n_sub + usize::from(s < cfg.steps_per_task % n_sub);
        train_steps(model, state, &samples, position, stream, cfg, steps)?;
        if n_sub > 1 {
            subs.push(prompt_side(&state.store));
        }
    }
    for x in &task.train {
        state.replay.insert(x, &mut state.rng);
    }
    state.log.max_buffer_len = state.log.max_buffer_len.max(state.replay.len());
    checkpoints.tasks.push(prompt_side(&state.store));
    checkpoints.subtasks.push(subs);
    Ok(())
}

/// Fraction of `samples` answered correctly under `mode`.
pub fn accuracy<'a>(
    model: &Model,
    store: &ParamStore,
    samples: impl Iterator<Item = &'a Sample>,
    mode: EvalMode,
    descriptor_mean: &[f64],
) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for x in samples {
        let pred = match mode.degrade() {
            None => model.predict(store, x)?,
            Some(d) => model.predict(store, &degrade_modality(x, d, descriptor_mean))?,
        };
        hit += usize::from(pred == x.label);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("accuracy"));
    }
    Ok(hit as f64 / n as f64)
}

fn with_backbone(backbone: &ParamStore, prompts: &ParamStore) -> ParamStore {
    let mut s = backbone.clone();
    s.merge(prompts);
    s
}

/// Full `T x T` matrices for each requested mode.
pub fn evaluate_matrix(
    model: &Model,
    backbone: &ParamStore,
    checkpoints: &[ParamStore],
    stream: &TaskStream,
    modes: &[EvalMode],
) -> Result<BTreeMap<EvalMode, AccuracyMatrix>> {
    let n = stream.tasks.len();
    if checkpoints.len() != n {
        return Err(Error::Bookkeeping(format!(
            "{} checkpoints for {n} tasks",
            checkpoints.len()
        )));
    }
    let mut out = BTreeMap::new();
    for &mode in modes {
        let mut m = AccuracyMatrix::new(n);
        for (j, ck) in checkpoints.iter().enumerate() {
            let store = with_backbone(backbone, ck);
            for (t, task) in stream.tasks.iter().enumerate() {
                m.set(j, t, accuracy(model, &store, task.test.iter(), mode, &stream.descriptor_mean)?)?;
            }
        }
        out.insert(mode, m);
    }
    Ok(out)
}

/// Per-task `S x S` joint-mode matrices over subtask checkpoints.
pub fn evaluate_subtasks(
    model: &Model,
    backbone: &ParamStore,
    checkpoints: &[Vec<ParamStore>],
    stream: &TaskStream,
) -> Result<Vec<AccuracyMatrix>> {
    let mut out = Vec::new();
    for (task, cks) in stream.tasks.iter().zip(checkpoints) {
        let s = task.n_subtasks();
        if s < 2 {
            continue;
        }
        if cks.len() != s {
            return Err(Error::Bookkeeping(format!(
                "{} subtask checkpoints for {s} subtasks",
                cks.len()
            )));
        }
        let mut m = AccuracyMatrix::new(s);
        for (j, ck) in cks.iter().enumerate() {
            let store = with_backbone(backbone, ck);
            for sub in 0..s {
                m.set(
                    j,
                    sub,
                    accuracy(model, &store, task.test_subtask(sub), EvalMode::Joint, &stream.descriptor_mean)?,
                )?;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Everything a run produces, including in-memory checkpoints.
pub struct RunOutcome {
    pub report: RunReport,
    pub backbone: ParamStore,
    pub checkpoints: Checkpoints,
    pub access_log: AccessLog,
}

pub fn run_full(cfg: &RunConfig) -> Result<RunOutcome> {
    let t_start = Instant::now();
    let prep = prepare(cfg)?;
    let backbone_store = prep.store.subset(BACKBONE_PREFIX);
    let mut state = TrainState::new(prep.store.clone(), cfg);
    let mut checkpoints = Checkpoints::default();
    let t_train = Instant::now();
    let mut frozen_intact = true;
    for pos in 0..prep.stream.tasks.len() {
        train_task(&prep.model, &mut state, &prep.stream, pos, cfg, &mut checkpoints)?;
        frozen_intact &= prep.snapshot.matches(&state.store);
    }
    let train_seconds = t_train.elapsed().as_secs_f64();
    let t_eval = Instant::now();
    let matrices = evaluate_matrix(&prep.model, &backbone_store, &checkpoints.tasks, &prep.stream, &cfg.eval_modes)?;
    let subtask_matrices = evaluate_subtasks(&prep.model, &backbone_store, &checkpoints.subtasks, &prep.stream)?;
    let eval_seconds = t_eval.elapsed().as_secs_f64();
    let joint = matrices
        .get(&EvalMode::Joint)
        .ok_or_else(|| Error::Config("eval.modes must include joint".into()))?;
    let metrics = compute_metrics(
        joint,
        matrices.get(&EvalMode::VOnly),
        matrices.get(&EvalMode::QOnly),
        Some(&subtask_matrices),
    )?;
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.entries(),
        config_digest: checkpoint::sha256_hex(cfg.to_text().as_bytes()),
        task_order: prep.stream.tasks.iter().map(|t| t.id).collect(),
        matrices: matrices.into_iter().map(|(m, a)| (m.name().to_string(), a)).collect(),
        subtask_matrices,
        metrics,
        loss_curve: state.curve,
        warmup_loss: prep.warmup_loss,
        backbone_digest: prep.snapshot.digest.clone(),
        backbone_digest_after: FrozenSnapshot::take(&state.store).digest,
        frozen_intact: frozen_intact && prep.snapshot.matches(&state.store),
        prompt_digest: prompt_side(&state.store).digest(""),
        replay_capacity: cfg.replay_size,
        replay_max_len: state.log.max_buffer_len,
        replay_isolated: state.log.isolated(),
        degenerate_inter: state.degenerate_inter,
        timing: Timing {
            warmup_seconds: prep.warmup_seconds,
            train_seconds,
            eval_seconds,
            total_seconds: t_start.elapsed().as_secs_f64(),
        },
    };
    Ok(RunOutcome {
        report,
        backbone: backbone_store,
        checkpoints,
        access_log: state.log,
    })
}

/// generate, warm up, freeze, train and evaluate every task, then report.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    Ok(run_full(cfg)?.report)
}
