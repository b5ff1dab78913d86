//! Synthetic multimodal continual streams.
//!
//! Every sample shows one object of some class with four attributes
//! (color, count, shape, size) and asks one templated question about it.
//! Questions are three tokens: a question-type token, the object's class
//! token (or a generic object token when the class itself is asked) and an
//! attribute slot used by the yes/no question. Each class has typical
//! attribute values, which gives the question alone a usable prior.
//!
//! The vision descriptor is split into four regions of equal width:
//! two carry the class prototype, one color and shape, one count, size
//! and a distractor channel. The distractor correlates with the label in
//! early tasks only.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_COLORS: usize = 4;
pub const N_COUNTS: usize = 4;
pub const N_SHAPES: usize = 4;
pub const N_SIZES: usize = 3;
pub const QUESTION_LEN: usize = 3;
pub const PROTO_DIM: usize = 16;
pub const DESCRIPTOR_DIM: usize = 32;
pub const REGIONS: usize = 4;

const OFF_COLOR: usize = 16;
const OFF_SHAPE: usize = 20;
const OFF_COUNT: usize = 24;
const OFF_SIZE: usize = 28;
const OFF_DISTRACTOR: usize = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    QI,
    CI,
    DI,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::QI => "qi",
            Setting::CI => "ci",
            Setting::DI => "di",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qi" => Ok(Setting::QI),
            "ci" => Ok(Setting::CI),
            "di" => Ok(Setting::DI),
            other => Err(Error::Config(format!("unknown setting '{other}' (expected qi, ci or di)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    WhatClass,
    WhatColor,
    HowMany,
    WhatShape,
    IsColor,
    WhatSize,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [
        QuestionType::WhatClass,
        QuestionType::WhatColor,
        QuestionType::HowMany,
        QuestionType::WhatShape,
        QuestionType::IsColor,
        QuestionType::WhatSize,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|q| *q == self).expect("listed")
    }

    fn answers(self, n_classes: usize) -> usize {
        match self {
            QuestionType::WhatClass => n_classes,
            QuestionType::WhatColor => N_COLORS,
            QuestionType::HowMany => N_COUNTS,
            QuestionType::WhatShape => N_SHAPES,
            QuestionType::IsColor => 2,
            QuestionType::WhatSize => N_SIZES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: usize,
    /// Object count minus one, so `0..4` stands for 1 to 4 objects.
    pub count: usize,
    pub shape: usize,
    pub size: usize,
}

/// Question-token ids. Id 0 is the neutral placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub n_classes: usize,
}

impl TokenSpace {
    pub const NEUTRAL: usize = 0;

    pub fn qtype(&self, q: QuestionType) -> usize {
        1 + q.index()
    }

    pub fn class(&self, c: usize) -> usize {
        1 + QuestionType::ALL.len() + c
    }

    pub fn object(&self) -> usize {
        1 + QuestionType::ALL.len() + self.n_classes
    }

    pub fn color(&self, c: usize) -> usize {
        self.object() + 1 + c
    }

    pub fn size(&self) -> usize {
        self.color(N_COLORS)
    }
}

/// Global answer vocabulary: one contiguous block per active question type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    pub n_classes: usize,
    pub qtypes: Vec<QuestionType>,
    offsets: Vec<usize>,
    size: usize,
}

impl AnswerSpace {
    pub fn new(n_classes: usize, qtypes: &[QuestionType]) -> Self {
        let mut offsets = vec![usize::MAX; QuestionType::ALL.len()];
        let mut size = 0;
        for q in qtypes {
            offsets[q.index()] = size;
            size += q.answers(n_classes);
        }
        Self {
            n_classes,
            qtypes: qtypes.to_vec(),
            offsets,
            size,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Ground-truth answer id as a function of the raw attributes.
    pub fn label(&self, class: usize, a: &Attributes, q: QuestionType, slot_color: usize) -> Result<usize> {
        let off = self.offsets[q.index()];
        if off == usize::MAX {
            return Err(Error::Config(format!("question type {q:?} is not active")));
        }
        Ok(off
            + match q {
                QuestionType::WhatClass => class,
                QuestionType::WhatColor => a.color,
                QuestionType::HowMany => a.count,
                QuestionType::WhatShape => a.shape,
                QuestionType::IsColor => usize::from(a.color == slot_color),
                QuestionType::WhatSize => a.size,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub question_tokens: Vec<usize>,
    pub vision_descriptor: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
    pub subtask_id: usize,
    pub class_id: usize,
    pub qtype: QuestionType,
    pub attributes: Attributes,
    /// Color asked about by the yes/no question.
    pub slot_color: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Position of the task in the stream as generated.
    pub id: usize,
    pub classes: Vec<usize>,
    /// One entry per subtask; non-DI streams have a single subtask.
    pub subtask_qtypes: Vec<Vec<QuestionType>>,
    /// Ordered by subtask.
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Task {
    pub fn n_subtasks(&self) -> usize {
        self.subtask_qtypes.len()
    }

    pub fn train_subtask(&self, s: usize) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(move |x| x.subtask_id == s)
    }

    pub fn test_subtask(&self, s: usize) -> impl Iterator<Item = &Sample> {
        self.test.iter().filter(move |x| x.subtask_id == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub setting: Setting,
    pub n_tasks: usize,
    pub n_classes: usize,
    pub n_question_types: usize,
    /// Subtasks per task, DI only.
    pub n_subtasks: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub noise_level: f64,
    /// Probability that an attribute takes its class-typical value.
    pub typicality: f64,
    /// Number of leading tasks whose distractor channel tracks the label.
    pub distractor_tasks: usize,
    pub distractor_strength: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            setting: Setting::DI,
            n_tasks: 4,
            n_classes: 8,
            n_question_types: 6,
            n_subtasks: 3,
            train_per_task: 400,
            test_per_task: 200,
            noise_level: 0.3,
            typicality: 0.6,
            distractor_tasks: 2,
            distractor_strength: 1.0,
            seed: 0,
        }
    }
}

/// Per-class generative parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub prototype: Vec<f64>,
    pub typical: Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub tokens: TokenSpace,
    pub answers: AnswerSpace,
    pub classes: Vec<ClassSpec>,
    pub class_groups: Vec<Vec<usize>>,
    pub question_groups: Vec<Vec<QuestionType>>,
    pub tasks: Vec<Task>,
    /// Mean training descriptor, used to blank the vision modality.
    pub descriptor_mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    VOnly,
    QOnly,
}

fn partition<T: Clone>(items: &[T], parts: usize, what: &str) -> Result<Vec<Vec<T>>> {
    if parts == 0 || items.len() % parts != 0 || items.is_empty() {
        return Err(Error::Config(format!(
            "cannot split {} {what} into {parts} equal groups",
            items.len()
        )));
    }
    Ok(items.chunks(items.len() / parts).map(|c| c.to_vec()).collect())
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=QuestionType::ALL.len()).contains(&self.n_question_types) {
            return Err(Error::Config(format!(
                "taskgen.n_question_types = {} must be in 1..=6",
                self.n_question_types
            )));
        }
        if self.n_tasks == 0 || self.n_classes < 2 {
            return Err(Error::Config("need at least one task and two classes".into()));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::Config("splits must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.typicality) {
            return Err(Error::Config("taskgen.typicality must lie in [0, 1]".into()));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(Error::Config("taskgen.noise must be non-negative".into()));
        }
        Ok(())
    }
}

fn one_hot(out: &mut [f64], offset: usize, idx: usize) {
    out[offset + idx] = 1.0;
}

fn draw_attr(rng: &mut ChaCha8Rng, typical: usize, n: usize, typicality: f64) -> usize {
    if rng.gen::<f64>() < typicality {
        typical
    } else {
        rng.gen_range(0..n)
    }
}

struct Generator<'a> {
    cfg: &'a StreamConfig,
    tokens: TokenSpace,
    answers: &'a AnswerSpace,
    classes: &'a [ClassSpec],
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        class: usize,
        qtype: QuestionType,
        task_id: usize,
        subtask_id: usize,
        correlated: bool,
    ) -> Result<Sample> {
        let spec = &self.classes[class];
        let ty = self.cfg.typicality;
        let a = Attributes {
            color: draw_attr(rng, spec.typical.color, N_COLORS, ty),
            count: draw_attr(rng, spec.typical.count, N_COUNTS, ty),
            shape: draw_attr(rng, spec.typical.shape, N_SHAPES, ty),
            size: draw_attr(rng, spec.typical.size, N_SIZES, ty),
        };
        let slot_color = if rng.gen::<bool>() {
            a.color
        } else {
            (a.color + rng.gen_range(1..N_COLORS)) % N_COLORS
        };
        let label = self.answers.label(class, &a, qtype, slot_color)?;
        let t = &self.tokens;
        let question_tokens = match qtype {
            QuestionType::WhatClass => vec![t.qtype(qtype), t.object(), TokenSpace::NEUTRAL],
            QuestionType::IsColor => vec![t.qtype(qtype), t.class(class), t.color(slot_color)],
            _ => vec![t.qtype(qtype), t.class(class), TokenSpace::NEUTRAL],
        };
        let mut x = vec![0.0; DESCRIPTOR_DIM];
        x[..PROTO_DIM].copy_from_slice(&spec.prototype);
        one_hot(&mut x, OFF_COLOR, a.color);
        one_hot(&mut x, OFF_SHAPE, a.shape);
        one_hot(&mut x, OFF_COUNT, a.count);
        one_hot(&mut x, OFF_SIZE, a.size);
        let sign = if correlated {
            if label % 2 == 0 { 1.0 } else { -1.0 }
        } else if rng.gen::<bool>() {
            1.0
        } else {
            -1.0
        };
        x[OFF_DISTRACTOR] = sign * self.cfg.distractor_strength;
        for v in x.iter_mut() {
            *v += self.noise.sample(rng);
        }
        Ok(Sample {
            question_tokens,
            vision_descriptor: x,
            label,
            task_id,
            subtask_id,
            class_id: class,
            qtype,
            attributes: a,
            slot_color,
        })
    }
}

/// Builds a reproducible stream.
pub fn generate_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let qtypes: Vec<QuestionType> = QuestionType::ALL[..cfg.n_question_types].to_vec();
    let class_ids: Vec<usize> = (0..cfg.n_classes).collect();
    let (class_groups, question_groups) = match cfg.setting {
        Setting::QI => (
            vec![class_ids.clone(); cfg.n_tasks],
            partition(&qtypes, cfg.n_tasks, "question types")?,
        ),
        Setting::CI => (
            partition(&class_ids, cfg.n_tasks, "classes")?,
            vec![qtypes.clone(); cfg.n_tasks],
        ),
        Setting::DI => {
            if cfg.n_subtasks < 1 {
                return Err(Error::Config("taskgen.n_subtasks must be positive".into()));
            }
            (
                partition(&class_ids, cfg.n_tasks, "classes")?,
                partition(&qtypes, cfg.n_subtasks, "question types")?,
            )
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proto = Normal::new(0.0, 1.0).expect("valid normal");
    let classes: Vec<ClassSpec> = (0..cfg.n_classes)
        .map(|_| ClassSpec {
            prototype: (0..PROTO_DIM).map(|_| proto.sample(&mut rng)).collect(),
            typical: Attributes {
                color: rng.gen_range(0..N_COLORS),
                count: rng.gen_range(0..N_COUNTS),
                shape: rng.gen_range(0..N_SHAPES),
                size: rng.gen_range(0..N_SIZES),
            },
        })
        .collect();
    let tokens = TokenSpace { n_classes: cfg.n_classes };
    let answers = AnswerSpace::new(cfg.n_classes, &qtypes);
    let gen = Generator {
        cfg,
        tokens,
        answers: &answers,
        classes: &classes,
        noise: Normal::new(0.0, cfg.noise_level.max(0.0)).map_err(|e| Error::Config(e.to_string()))?,
    };

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let cls = &class_groups[t];
        let subtask_qtypes = match cfg.setting {
            Setting::DI => question_groups.clone(),
            _ => vec![question_groups[t].clone()],
        };
        let correlated = t < cfg.distractor_tasks;
        let mut split = |n: usize| -> Result<Vec<Sample>> {
            let s_count = subtask_qtypes.len();
            let mut out = Vec::with_capacity(n);
            for (s, qs) in subtask_qtypes.iter().enumerate() {
                let share = n / s_count + usize::from(s < n % s_count);
                for _ in 0..share {
                    let c = cls[rng.gen_range(0..cls.len())];
                    let q = qs[rng.gen_range(0..qs.len())];
                    out.push(gen.sample(&mut rng, c, q, t, s, correlated)?);
                }
            }
            Ok(out)
        };
        let train = split(cfg.train_per_task)?;
        let test = split(cfg.test_per_task)?;
        tasks.push(Task {
            id: t,
            classes: cls.clone(),
            subtask_qtypes,
            train,
            test,
        });
    }

    let n_train: usize = tasks.iter().map(|t| t.train.len()).sum();
    let mut descriptor_mean = vec![0.0; DESCRIPTOR_DIM];
    for s in tasks.iter().flat_map(|t| &t.train) {
        for (m, v) in descriptor_mean.iter_mut().zip(&s.vision_descriptor) {
            *m += v;
        }
    }
    for m in descriptor_mean.iter_mut() {
        *m /= n_train as f64;
    }

    Ok(TaskStream {
        config: cfg.clone(),
        tokens,
        answers,
        classes,
        class_groups,
        question_groups,
        tasks,
        descriptor_mean,
    })
}

/// Task-agnostic samples over every class and active question type, with an
/// uninformative distractor.
pub fn warmup_samples(stream: &TaskStream, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let cfg = &stream.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator {
        cfg,
        tokens: stream.tokens,
        answers: &stream.answers,
        classes: &stream.classes,
        noise: Normal::new(0.0, cfg.noise_level.max(0.0)).map_err(|e| Error::Config(e.to_string()))?,
    };
    (0..n)
        .map(|_| {
            let c = rng.gen_range(0..cfg.n_classes);
            let q = QuestionType::ALL[rng.gen_range(0..cfg.n_question_types)];
            gen.sample(&mut rng, c, q, usize::MAX, 0, false)
        })
        .collect()
}

/// Reorders tasks by `perm` (new position `i` holds old task `perm[i]`).
pub fn apply_permutation(stream: &TaskStream, perm: &[usize]) -> Result<TaskStream> {
    let n = stream.tasks.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Config(format!("{perm:?} is not a permutation of {n} tasks")));
    }
    let mut out = stream.clone();
    out.tasks = perm.iter().map(|&p| stream.tasks[p].clone()).collect();
    out.class_groups = perm.iter().map(|&p| stream.class_groups[p].clone()).collect();
    if stream.config.setting == Setting::QI {
        out.question_groups = perm.iter().map(|&p| stream.question_groups[p].clone()).collect();
    }
    Ok(out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn order_permutation(n: usize, permutation_seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(permutation_seed));
    perm
}

/// Shuffles the task order deterministically.
pub fn permute_order(stream: &TaskStream, permutation_seed: u64) -> Result<TaskStream> {
    apply_permutation(stream, &order_permutation(stream.tasks.len(), permutation_seed))
}

/// Blanks one modality: `VOnly` keeps only vision (neutral question tokens),
/// `QOnly` keeps only the question (mean descriptor).
pub fn degrade_modality(sample: &Sample, mode: DegradeMode, descriptor_mean: &[f64]) -> Sample {
    let mut s = sample.clone();
    match mode {
        DegradeMode::VOnly => s.question_tokens = vec![TokenSpace::NEUTRAL; sample.question_tokens.len()],
        DegradeMode::QOnly => s.vision_descriptor = descriptor_mean.to_vec(),
    }
    s
}

#[derive(Serialize)]
struct Record<'a> {
    task: usize,
    position: usize,
    split: &'a str,
    subtask: usize,
    index: usize,
    tokens: &'a [usize],
    descriptor: &'a [f64],
    label: usize,
}

/// One JSON record per line, tasks in stream order.
pub fn export_jsonl(stream: &TaskStream, mut w: impl Write) -> Result<usize> {
    let mut n = 0;
    for (pos, task) in stream.tasks.iter().enumerate() {
        for (split, samples) in [("train", &task.train), ("test", &task.test)] {
            for (i, s) in samples.iter().enumerate() {
                let r = Record {
                    task: task.id,
                    position: pos,
                    split,
                    subtask: s.subtask_id,
                    index: i,
                    tokens: &s.question_tokens,
                    descriptor: &s.vision_descriptor,
                    label: s.label,
                };
                serde_json::to_writer(&mut w, &r).map_err(|e| Error::Io(e.to_string()))?;
                w.write_all(b"\n")?;
                n += 1;
            }
        }
    }
    Ok(n)
}
