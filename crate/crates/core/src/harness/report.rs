//! Run reports and the files written for them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::sha256_hex;
use super::metrics::{AccuracyMatrix, Metrics};
use crate::error::{Error, Result};
use crate::model::LossTerms;

/// Wall-clock seconds. Kept apart from everything else so that the other
/// outputs are byte-for-byte reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
    /// Task ids in training order.
    pub task_order: Vec<usize>,
    /// Keyed by evaluation mode name.
    pub matrices: BTreeMap<String, AccuracyMatrix>,
    pub subtask_matrices: Vec<AccuracyMatrix>,
    pub metrics: Metrics,
    /// Batch-mean loss terms per training step.
    pub loss_curve: Vec<LossTerms>,
    pub warmup_loss: f64,
    pub backbone_digest: String,
    pub backbone_digest_after: String,
    pub frozen_intact: bool,
    pub prompt_digest: String,
    pub replay_capacity: usize,
    pub replay_max_len: usize,
    pub replay_isolated: bool,
    pub degenerate_inter: usize,
    #[serde(skip)]
    pub timing: Timing,
}

impl RunReport {
    /// Report JSON without timing.
    pub fn deterministic_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn metrics_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            metrics: &'a Metrics,
            matrices: &'a BTreeMap<String, AccuracyMatrix>,
            subtask_matrices: &'a [AccuracyMatrix],
        }
        serde_json::to_string_pretty(&Out {
            metrics: &self.metrics,
            matrices: &self.matrices,
            subtask_matrices: &self.subtask_matrices,
        })
        .expect("metrics serialize")
    }

    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("step,ce,qk_align,inter,intra,total\n");
        for (i, t) in self.loss_curve.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                t.ce,
                t.qk_align,
                t.inter,
                t.intra,
                t.total
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
    /// Contents vary between identical runs (wall-clock data).
    pub volatile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn digest_of(&self, file: &str) -> Option<&str> {
        self.files.iter().find(|e| e.file == file).map(|e| e.sha256.as_str())
    }
}

/// Writes every output of a run into `dir` plus `manifest.json`.
pub fn write_outputs(report: &RunReport, config_text: &str, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String, bool)> = vec![
        ("config.txt".into(), config_text.to_string(), false),
        ("report.json".into(), report.deterministic_json(), false),
        ("metrics.json".into(), report.metrics_json(), false),
        ("loss_curve.csv".into(), report.loss_curve_csv(), false),
        (
            "timing.json".into(),
            serde_json::to_string_pretty(&report.timing).map_err(|e| Error::Io(e.to_string()))?,
            true,
        ),
    ];
    for (mode, m) in &report.matrices {
        files.push((format!("acc_{mode}.csv"), m.to_csv(), false));
    }
    for (i, m) in report.subtask_matrices.iter().enumerate() {
        files.push((format!("acc_subtasks_task{}.csv", i + 1), m.to_csv(), false));
    }
    let mut entries = Vec::new();
    for (name, body, volatile) in files {
        fs::write(dir.join(&name), body.as_bytes())?;
        entries.push(ManifestEntry {
            sha256: sha256_hex(body.as_bytes()),
            bytes: body.len(),
            file: name,
            volatile,
        });
    }
    let manifest = Manifest {
        version: report.version.clone(),
        files: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}
