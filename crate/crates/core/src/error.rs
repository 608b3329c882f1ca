use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite state in block {block}")]
    NonFiniteState { block: usize },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("kernel underflow in standard-domain Sinkhorn (epsilon = {epsilon:e}); use the log-domain solver")]
    NumericalUnderflow { epsilon: f64 },

    #[error("optimization diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("missing correspondence: {0}")]
    MissingCorrespondence(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
