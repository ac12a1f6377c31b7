use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: timestamp {timestamp} is not after previous timestamp {previous}")]
    NonMonotonic {
        line: u64,
        timestamp: i64,
        previous: i64,
    },

    #[error("header mismatch: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least 10 samples for an 8:1:1 split, got {0}")]
    TooFewSamples(usize),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error("checkpoint holds a {found} model but {expected} was requested")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("infeasible label ratio: {0}")]
    InfeasibleRatio(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
