//! Cross-modal prompt query and cross-modal prompt recovery for continual
//! visual question answering, exercised on synthetic multimodal task streams
//! with a small frozen transformer backbone.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode tape, attention block, gradient oracle
//! - [`prompt_store`]: prompt pools, cosine top-k retrieval, aggregation
//! - [`cross_query`]: cross-modal query construction and fusion baselines
//! - [`recovery`]: shared masking, intra/inter-modal recovery and their losses
//! - [`backbone`]: feature stems, prompt injection, classifier head
//! - [`taskgen`]: QI / CI / DI synthetic streams
//! - [`harness`]: training loop, metrics, replay, reports, checkpoints
//! - [`config`]: dotted-key run configuration

pub mod backbone;
pub mod config;
pub mod cross_query;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod prompt_store;
pub mod recovery;
pub mod taskgen;

pub use error::{Error, Result};
