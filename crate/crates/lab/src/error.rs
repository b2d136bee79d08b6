use std::path::PathBuf;

use cil_core::CilError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{}: unknown key `{key}`, did you mean `{suggestion}`?", path.display())]
    UnknownKey {
        path: PathBuf,
        key: String,
        suggestion: String,
    },

    #[error("{}: missing required key `{key}`", path.display())]
    MissingKey { path: PathBuf, key: String },

    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("invalid experiment: {0}")]
    Invalid(String),

    #[error("{0}")]
    Core(#[from] CilError),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("runs do not share a stream: {0}")]
    Heterogeneous(String),

    #[error("cannot plot: {0}")]
    Plot(String),
}

impl LabError {
    /// Short stable identifier printed by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::UnknownKey { .. } => "unknown-key",
            LabError::MissingKey { .. } => "missing-key",
            LabError::Config { .. } => "config",
            LabError::Invalid(_) => "invalid",
            LabError::Core(CilError::AtStage { .. }) => "training",
            LabError::Core(_) => "core",
            LabError::Io { .. } => "io",
            LabError::Json { .. } => "json",
            LabError::Csv { .. } => "csv",
            LabError::Heterogeneous(_) => "heterogeneous-streams",
            LabError::Plot(_) => "plot",
        }
    }

    pub(crate) fn config(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        LabError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
