//! Runs several experiments on one stream and ranks them by average accuracy.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::runner::{self, RunReport};

/// One line of the ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub algorithm: String,
    pub average: f64,
    pub final_accuracy: f64,
    pub fingerprint: String,
}

impl Row {
    fn from_report(r: &RunReport) -> Row {
        Row {
            algorithm: r.algorithm().to_string(),
            average: r.result.average,
            final_accuracy: r.result.final_accuracy(),
            fingerprint: r.result.fingerprint.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// Sorted by average accuracy, best first.
    pub rows: Vec<Row>,
    /// Reports in the order of the input configs.
    pub reports: Vec<RunReport>,
    /// For each input config, whether its report came from the cache.
    pub cached: Vec<bool>,
}

/// Descending average accuracy, then algorithm name, then fingerprint.
pub fn rank(rows: &mut [Row]) {
    rows.sort_by(|a, b| {
        b.average
            .partial_cmp(&a.average)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.algorithm.cmp(&b.algorithm))
            .then_with(|| a.fingerprint.cmp(&b.fingerprint))
    });
}

fn check_inputs(configs: &[ExperimentConfig]) -> Result<()> {
    let first = configs
        .first()
        .ok_or_else(|| LabError::Invalid("compare needs at least one config".into()))?;
    let key = first.stream_key();
    for c in &configs[1..] {
        if c.stream_key() != key {
            return Err(LabError::Heterogeneous(format!(
                "`{}` uses {} but `{}` uses {}",
                first.algorithm(),
                key,
                c.algorithm(),
                c.stream_key()
            )));
        }
    }
    let mut dirs = BTreeSet::new();
    for c in configs {
        if !dirs.insert(&c.output_dir) {
            return Err(LabError::Invalid(format!(
                "two configs write to {}",
                c.output_dir.display()
            )));
        }
    }
    for c in configs {
        c.validate_static().map_err(LabError::Invalid)?;
    }
    Ok(())
}

/// Runs every config (in parallel) unless its output directory already holds
/// a result with the same fingerprint.
pub fn compare(configs: &[ExperimentConfig]) -> Result<Comparison> {
    check_inputs(configs)?;
    let outcomes: Vec<Result<(RunReport, bool)>> = configs
        .par_iter()
        .map(|c| match runner::cached_report(c, &c.output_dir) {
            Some(r) => Ok((r, true)),
            None => runner::run(c, None).map(|r| (r, false)),
        })
        .collect();
    let mut reports = Vec::with_capacity(configs.len());
    let mut cached = Vec::with_capacity(configs.len());
    for o in outcomes {
        let (r, hit) = o?;
        reports.push(r);
        cached.push(hit);
    }
    let shapes: BTreeSet<String> = reports
        .iter()
        .map(|r| format!("{:?}", r.result.per_stage_class_counts))
        .collect();
    if shapes.len() > 1 {
        return Err(LabError::Heterogeneous(format!(
            "stages see different class counts: {}",
            shapes.into_iter().collect::<Vec<_>>().join(" vs ")
        )));
    }
    let mut rows: Vec<Row> = reports.iter().map(Row::from_report).collect();
    rank(&mut rows);
    Ok(Comparison { rows, reports, cached })
}

/// Plain-text table with accuracies in percent.
pub fn render_table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.algorithm.len()).max().unwrap_or(0).max("algorithm".len());
    let mut out = String::new();
    writeln!(out, "{:>4}  {:<width$}  {:>9}  {:>9}", "rank", "algorithm", "avg_acc", "final_acc").unwrap();
    for (i, r) in rows.iter().enumerate() {
        writeln!(
            out,
            "{:>4}  {:<width$}  {:>9.2}  {:>9.2}",
            i + 1,
            r.algorithm,
            100.0 * r.average,
            100.0 * r.final_accuracy
        )
        .unwrap();
    }
    out
}
