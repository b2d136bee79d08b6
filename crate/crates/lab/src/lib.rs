//! Config-driven class-incremental experiments.
//!
//! An experiment is described by a TOML file (see [`config`]). [`runner::run`]
//! trains the configured learner over the task stream and writes
//! `results.json`, `results.csv`, `manifest.json` and `train_log.jsonl`.
//! [`compare::compare`] ranks several runs on the same stream and
//! [`plot::render_svg`] draws their accuracy curves.

pub mod compare;
pub mod config;
pub mod error;
pub mod plot;
pub mod runner;

use std::path::Path;

pub use config::{parse_config, ExperimentConfig};
pub use error::{LabError, Result};
pub use runner::{Manifest, RunReport};

/// Reads an experiment from a TOML config or from a `manifest.json` written
/// by an earlier run.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(Manifest::load(path)?.config)
    } else {
        parse_config(path)
    }
}
