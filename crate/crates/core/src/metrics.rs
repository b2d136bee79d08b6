//! Top-1 accuracy per stage and averaged over stages.

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of exact matches.
pub fn stage_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(CilError::invalid(format!(
            "stage_accuracy: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(CilError::invalid("stage_accuracy: empty evaluation set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Arithmetic mean of the per-stage accuracies.
pub fn average_accuracy(stage_accuracies: &[f64]) -> Result<f64> {
    if stage_accuracies.is_empty() {
        return Err(CilError::invalid("average_accuracy: no stages"));
    }
    Ok(stage_accuracies.iter().sum::<f64>() / stage_accuracies.len() as f64)
}

/// Accuracy restricted to old-class and new-class instances. A group with no
/// test instances is reported as `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub old_count: usize,
    pub new_count: usize,
}

pub fn per_group_accuracy<F>(predictions: &[usize], labels: &[usize], is_old: F) -> Result<GroupAccuracy>
where
    F: Fn(usize) -> bool,
{
    if predictions.len() != labels.len() {
        return Err(CilError::invalid("per_group_accuracy: length mismatch"));
    }
    let (mut old_hit, mut old_n, mut new_hit, mut new_n) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        if is_old(l) {
            old_n += 1;
            old_hit += usize::from(p == l);
        } else {
            new_n += 1;
            new_hit += usize::from(p == l);
        }
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(GroupAccuracy {
        old: frac(old_hit, old_n),
        new: frac(new_hit, new_n),
        old_count: old_n,
        new_count: new_n,
    })
}

/// Outcome of one incremental run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: String,
    pub stage_accuracies: Vec<f64>,
    pub average: f64,
    pub per_stage_class_counts: Vec<usize>,
    pub old_accuracies: Vec<Option<f64>>,
    pub new_accuracies: Vec<Option<f64>>,
    pub fingerprint: String,
}

impl RunResult {
    pub fn new(
        algorithm: impl Into<String>,
        stage_accuracies: Vec<f64>,
        per_stage_class_counts: Vec<usize>,
        groups: &[GroupAccuracy],
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if stage_accuracies.len() != per_stage_class_counts.len() || groups.len() != stage_accuracies.len() {
            return Err(CilError::invalid("RunResult: per-stage lists differ in length"));
        }
        let average = average_accuracy(&stage_accuracies)?;
        Ok(RunResult {
            algorithm: algorithm.into(),
            average,
            stage_accuracies,
            per_stage_class_counts,
            old_accuracies: groups.iter().map(|g| g.old).collect(),
            new_accuracies: groups.iter().map(|g| g.new).collect(),
            fingerprint: fingerprint.into(),
        })
    }

    pub fn final_accuracy(&self) -> f64 {
        *self.stage_accuracies.last().expect("at least one stage")
    }

    pub fn num_stages(&self) -> usize {
        self.stage_accuracies.len()
    }
}
