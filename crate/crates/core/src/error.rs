use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("map has {0} free cells, need at least 2")]
    TooFewFreeCells(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unsupported objective: {0}")]
    UnsupportedObjective(&'static str),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("malformed asset: {0}")]
    Parse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("request cancelled")]
    Cancelled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
