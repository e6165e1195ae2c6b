use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] steer_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint does not match the requested configuration: {0}")]
    Mismatch(String),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
