use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown period index {0}")]
    UnknownPeriod(usize),

    #[error("period {0} has no events")]
    EmptyPeriod(usize),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in input")]
    NonFinite,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for a head with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} is already present in the head")]
    DuplicateClass(u32),

    #[error("class {0} is unknown to the model")]
    UnknownClass(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("replay buffer was built for period {built}, not {expected}")]
    BufferPeriod { built: usize, expected: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
