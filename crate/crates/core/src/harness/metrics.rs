//! Accuracy matrices and the continual-learning metrics computed from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `acc[j][t]`: accuracy on task `t` at the checkpoint taken after task `j`
/// (both zero-based). Missing entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            acc: vec![vec![None; n]; n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self {
            acc: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.acc.len()
    }

    pub fn set(&mut self, j: usize, t: usize, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Bookkeeping(format!("accuracy {v} outside [0, 1]")));
        }
        *self
            .acc
            .get_mut(j)
            .and_then(|r| r.get_mut(t))
            .ok_or_else(|| Error::Bookkeeping(format!("entry ({j}, {t}) out of range")))? = Some(v);
        Ok(())
    }

    pub fn get(&self, j: usize, t: usize) -> Result<f64> {
        self.acc
            .get(j)
            .and_then(|r| r.get(t))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Bookkeeping(format!("accuracy ({j}, {t}) was not recorded")))
    }

    /// Final-checkpoint row.
    pub fn final_row(&self) -> Result<Vec<f64>> {
        let n = self.size();
        if n == 0 {
            return Err(Error::Bookkeeping("empty accuracy matrix".into()));
        }
        (0..n).map(|t| self.get(n - 1, t)).collect()
    }

    /// Comma-separated rows; missing entries are empty fields.
    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut s = String::from("checkpoint");
        for t in 0..n {
            s.push_str(&format!(",task{}", t + 1));
        }
        s.push('\n');
        for (j, row) in self.acc.iter().enumerate() {
            s.push_str(&format!("{}", j + 1));
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    s.push_str(&format!("{v}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the final-checkpoint row.
pub fn avg_performance(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `1/(T-1) * sum_{t<T} (max_{j<=t} acc[j][t] - acc[T][t])`.
pub fn inter_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    gap_metric(m, |t, _| t)
}

/// Variant maximizing over every checkpoint before the last, not only those
/// up to and including `t`.
pub fn inter_forgetting_all_checkpoints(m: &AccuracyMatrix) -> Result<f64> {
    gap_metric(m, |_, n| n - 2)
}

fn gap_metric(m: &AccuracyMatrix, last_j: impl Fn(usize, usize) -> usize) -> Result<f64> {
    let n = m.size();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "forgetting needs at least two checkpoints, got {n}"
        )));
    }
    let mut total = 0.0;
    for t in 0..n - 1 {
        let mut best = f64::NEG_INFINITY;
        for j in 0..=last_j(t, n) {
            best = best.max(m.get(j, t)?);
        }
        total += best - m.get(n - 1, t)?;
    }
    Ok(total / (n - 1) as f64)
}

/// Within-task forgetting: each matrix is `S x S` over one task's subtask
/// checkpoints; the gap metric is averaged over tasks.
pub fn intra_forgetting(subtask_matrices: &[AccuracyMatrix]) -> Result<f64> {
    if subtask_matrices.is_empty() {
        return Err(Error::UndefinedMetric("no subtask matrices (not a dual-increment stream)".into()));
    }
    let mut total = 0.0;
    for m in subtask_matrices {
        if m.size() < 2 {
            return Err(Error::UndefinedMetric(format!(
                "within-task forgetting needs at least two subtasks, got {}",
                m.size()
            )));
        }
        total += inter_forgetting(m)?;
    }
    Ok(total / subtask_matrices.len() as f64)
}

/// Joint accuracy minus the better single-modality accuracy.
pub fn merge_effectiveness(joint: f64, v_only: f64, q_only: f64) -> f64 {
    joint - v_only.max(q_only)
}

pub fn modality_difference(v_only: f64, q_only: f64) -> f64 {
    (v_only - q_only).abs()
}

/// Scalar summary recomputable from the stored matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_performance: f64,
    pub inter_forgetting: Option<f64>,
    pub inter_forgetting_all_checkpoints: Option<f64>,
    pub intra_forgetting: Option<f64>,
    /// Final-checkpoint values per task.
    pub merge_effectiveness: Vec<f64>,
    pub modality_difference: Vec<f64>,
    /// From the final-row means of the three modes.
    pub final_merge_effectiveness: Option<f64>,
    pub final_modality_difference: Option<f64>,
}

/// Computes every metric; the single-modality entries need all three modes.
pub fn compute_metrics(
    joint: &AccuracyMatrix,
    v_only: Option<&AccuracyMatrix>,
    q_only: Option<&AccuracyMatrix>,
    subtasks: Option<&[AccuracyMatrix]>,
) -> Result<Metrics> {
    let a = avg_performance(joint)?;
    let two = joint.size() >= 2;
    let mut me = Vec::new();
    let mut md = Vec::new();
    let (mut fme, mut fmd) = (None, None);
    if let (Some(v), Some(q)) = (v_only, q_only) {
        let (rj, rv, rq) = (joint.final_row()?, v.final_row()?, q.final_row()?);
        for t in 0..rj.len() {
            me.push(merge_effectiveness(rj[t], rv[t], rq[t]));
            md.push(modality_difference(rv[t], rq[t]));
        }
        let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
        fme = Some(merge_effectiveness(mean(&rj), mean(&rv), mean(&rq)));
        fmd = Some(modality_difference(mean(&rv), mean(&rq)));
    }
    Ok(Metrics {
        avg_performance: a,
        inter_forgetting: if two { Some(inter_forgetting(joint)?) } else { None },
        inter_forgetting_all_checkpoints: if two {
            Some(inter_forgetting_all_checkpoints(joint)?)
        } else {
            None
        },
        intra_forgetting: match subtasks {
            Some(s) if !s.is_empty() && s.iter().all(|m| m.size() >= 2) => Some(intra_forgetting(s)?),
            _ => None,
        },
        merge_effectiveness: me,
        modality_difference: md,
        final_merge_effectiveness: fme,
        final_modality_difference: fmd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.85, 0.2],
            vec![0.7, 0.8, 0.9],
        ])
    }

    #[test]
    fn average_cases() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9, 0.0], vec![0.5, 0.7]]);
        assert!((avg_performance(&m).unwrap() - 0.6).abs() < 1e-15);
        let c = AccuracyMatrix::from_rows(vec![vec![0.3; 3]; 3]);
        assert!((avg_performance(&c).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn inter_forgetting_worked_example() {
        assert!((inter_forgetting(&worked_example()).unwrap() - 0.125).abs() < 1e-12);
        let m = AccuracyMatrix::from_rows(vec![vec![0.5, 0.1], vec![0.5, 0.6]]);
        assert_eq!(inter_forgetting(&m).unwrap(), 0.0);
        assert!(matches!(
            inter_forgetting(&AccuracyMatrix::from_rows(vec![vec![0.5]])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn all_checkpoint_variant_sees_later_peaks() {
        // task 1 peaks at checkpoint 2, after it was learned
        let m = AccuracyMatrix::from_rows(vec![
            vec![0.6, 0.0, 0.0],
            vec![0.9, 0.7, 0.0],
            vec![0.6, 0.7, 0.8],
        ]);
        assert_eq!(inter_forgetting(&m).unwrap(), 0.0);
        assert!((inter_forgetting_all_checkpoints(&m).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn intra_forgetting_cases() {
        assert!(intra_forgetting(&[AccuracyMatrix::from_rows(vec![vec![0.4]])]).is_err());
        assert!(intra_forgetting(&[]).is_err());
        let flat = AccuracyMatrix::from_rows(vec![vec![0.5, 0.2], vec![0.5, 0.6]]);
        assert_eq!(intra_forgetting(&[flat.clone(), flat]).unwrap(), 0.0);
        let w = worked_example();
        let flat = AccuracyMatrix::from_rows(vec![vec![0.5, 0.2], vec![0.5, 0.6]]);
        assert!((intra_forgetting(&[w, flat]).unwrap() - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn modality_metrics() {
        assert!((merge_effectiveness(0.6, 0.3, 0.45) - 0.15).abs() < 1e-12);
        assert_eq!(merge_effectiveness(0.45, 0.3, 0.45), 0.0);
        assert!(merge_effectiveness(0.2, 0.3, 0.45) < 0.0);
        assert!((modality_difference(0.3, 0.45) - 0.15).abs() < 1e-12);
        assert_eq!(modality_difference(0.4, 0.4), 0.0);
        assert_eq!(modality_difference(0.1, 0.7), modality_difference(0.7, 0.1));
    }

    #[test]
    fn incomplete_final_row_is_bookkeeping_error() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.5).unwrap();
        m.set(1, 0, 0.5).unwrap();
        assert!(matches!(avg_performance(&m), Err(Error::Bookkeeping(_))));
        assert!(m.set(0, 0, 1.5).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = worked_example().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "checkpoint,task1,task2,task3");
        assert_eq!(lines[1], "1,0.9,0.1,0");
    }
}
