//! Executes one experiment and persists its artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cil_core::learners::{run_stream, TaskLog};
use cil_core::metrics::RunResult;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shape of the task sequence a run was evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamShape {
    pub total_classes: usize,
    pub init_cls: usize,
    pub increment: usize,
    pub num_stages: usize,
}

/// Contents of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub result: RunResult,
    pub stream: StreamShape,
    pub memory_sizes: Vec<usize>,
    /// Accuracy after each stage on the test data of every task seen so far.
    pub task_accuracies: Vec<Vec<f64>>,
}

impl RunReport {
    pub fn algorithm(&self) -> &str {
        &self.result.algorithm
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.result.per_stage_class_counts
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Contents of `manifest.json`: enough to repeat the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub seed: u64,
    pub fingerprint: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Manifest {
            code_version: CODE_VERSION.to_string(),
            seed: config.seed,
            fingerprint: config.fingerprint(),
            config: config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.config.fingerprint() != m.fingerprint {
            return Err(LabError::config(path, "fingerprint does not match the recorded config"));
        }
        Ok(m)
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    task: usize,
    phase: &'a str,
    epoch: usize,
    mean_loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct CsvRow {
    stage: usize,
    n_seen_classes: usize,
    #[serde(rename = "A_b")]
    accuracy: f64,
    old_acc: Option<f64>,
    new_acc: Option<f64>,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| LabError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| LabError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Renders the per-stage table written to `results.csv`.
pub fn results_csv(report: &RunReport, path_for_errors: &Path) -> Result<Vec<u8>> {
    let csv_err = |source| LabError::Csv {
        path: path_for_errors.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let r = &report.result;
    for b in 0..r.num_stages() {
        w.serialize(CsvRow {
            stage: b + 1,
            n_seen_classes: r.per_stage_class_counts[b],
            accuracy: r.stage_accuracies[b],
            old_acc: r.old_accuracies[b],
            new_acc: r.new_accuracies[b],
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| LabError::io(path_for_errors, e.into_error()))
}

fn train_log_lines(logs: &[TaskLog]) -> String {
    let mut out = String::new();
    for log in logs {
        for e in &log.epochs {
            let line = LogLine {
                task: log.task,
                phase: &log.phase,
                epoch: e.epoch,
                mean_loss: e.mean_loss,
                lr: e.lr,
            };
            out.push_str(&serde_json::to_string(&line).expect("log lines serialize"));
            out.push('\n');
        }
    }
    out
}

/// Trains and evaluates without touching the filesystem beyond reading data.
pub fn execute(config: &ExperimentConfig) -> Result<(RunReport, Vec<TaskLog>)> {
    let mut prepared = config.prepare()?;
    let outcome = run_stream(prepared.learner.as_mut(), &prepared.stream)?;
    let shape = prepared.stream.config();
    let result = RunResult::new(
        config.algorithm().name(),
        outcome.stage_accuracies,
        outcome.seen_classes,
        &outcome.groups,
        config.fingerprint(),
    )?;
    let report = RunReport {
        result,
        stream: StreamShape {
            total_classes: shape.total_classes,
            init_cls: shape.init_cls,
            increment: shape.increment,
            num_stages: prepared.stream.num_tasks(),
        },
        memory_sizes: outcome.memory_sizes,
        task_accuracies: outcome.task_accuracies,
    };
    Ok((report, prepared.learner.train_logs().to_vec()))
}

/// Runs `config` and writes `results.json`, `results.csv`, `manifest.json`
/// and `train_log.jsonl` into `out_dir` (the configured `output_dir` when
/// `None`). Nothing is written unless the whole run succeeds.
pub fn run(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    let dir: PathBuf = out_dir.map_or_else(|| config.output_dir.clone(), Path::to_path_buf);
    let (report, logs) = execute(config)?;
    let csv_path = dir.join(RESULTS_CSV);
    let csv = results_csv(&report, &csv_path)?;
    let log = train_log_lines(&logs);

    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    write_json(&dir.join(RESULTS_JSON), &report)?;
    fs::File::create(&csv_path)
        .and_then(|mut f| f.write_all(&csv))
        .map_err(|e| LabError::io(&csv_path, e))?;
    write_json(&dir.join(MANIFEST_JSON), &Manifest::new(config))?;
    let log_path = dir.join(TRAIN_LOG);
    fs::write(&log_path, log).map_err(|e| LabError::io(&log_path, e))?;
    Ok(report)
}

/// A previously written report in `dir` whose fingerprint and code version
/// match `config`.
pub fn cached_report(config: &ExperimentConfig, dir: &Path) -> Option<RunReport> {
    let manifest = Manifest::load(&dir.join(MANIFEST_JSON)).ok()?;
    if manifest.code_version != CODE_VERSION || manifest.fingerprint != config.fingerprint() {
        return None;
    }
    let report = RunReport::load(&dir.join(RESULTS_JSON)).ok()?;
    (report.result.fingerprint == manifest.fingerprint).then_some(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cil_core::metrics::GroupAccuracy;

    fn report() -> RunReport {
        let groups = [
            GroupAccuracy {
                old: None,
                new: Some(1.0),
                old_count: 0,
                new_count: 4,
            },
            GroupAccuracy {
                old: Some(0.25),
                new: Some(0.75),
                old_count: 4,
                new_count: 4,
            },
        ];
        RunReport {
            result: RunResult::new("replay", vec![1.0, 0.5], vec![2, 4], &groups, "ab").unwrap(),
            stream: StreamShape {
                total_classes: 4,
                init_cls: 2,
                increment: 2,
                num_stages: 2,
            },
            memory_sizes: vec![4, 4],
            task_accuracies: vec![vec![1.0], vec![0.25, 0.75]],
        }
    }

    #[test]
    fn csv_layout() {
        let text = String::from_utf8(results_csv(&report(), Path::new("x.csv")).unwrap()).unwrap();
        assert_eq!(
            text,
            "stage,n_seen_classes,A_b,old_acc,new_acc\n1,2,1.0,,1.0\n2,4,0.5,0.25,0.75\n"
        );
    }

    #[test]
    fn report_json_round_trips() {
        let r = report();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"average\":0.75"));
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
