use thiserror::Error;

pub type Result<T> = std::result::Result<T, CilError>;

#[derive(Debug, Error)]
pub enum CilError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("{path}: {location}: {msg}")]
    Parse {
        path: String,
        location: String,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("sinkhorn did not converge after {iters} iterations (residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error("training aborted at epoch {epoch}, step {step}: non-finite loss")]
    TrainingAborted { epoch: usize, step: usize },

    /// An error raised while a learner was processing stage `stage` (1-based).
    #[error("stage {stage}: {source}")]
    AtStage {
        stage: usize,
        #[source]
        source: Box<CilError>,
    },
}

impl CilError {
    pub fn at_stage(stage: usize, source: CilError) -> Self {
        CilError::AtStage {
            stage,
            source: Box::new(source),
        }
    }

    /// Stage index carried by the error, if any.
    pub fn stage(&self) -> Option<usize> {
        match self {
            CilError::AtStage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CilError::InvalidArgument(msg.into())
    }
}
