//! Error type shared by every module, with the process exit codes the CLI
//! maps each class to.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Error)]
pub enum EngineError {
    /// Invalid configuration or protocol (bad stream, out-of-range value, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or parameter-vector dimensions do not match the layout.
    #[error("shape error: {0}")]
    Shape(String),

    /// A loss, gradient or parameter became non-finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// On-disk artifacts are inconsistent (bad magic, mismatched seeds,
    /// missing matrix entries, ...).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl EngineError {
    /// Exit code contract: 0 success, 2 config, 3 numeric, 4 integrity.
    /// I/O and serialization problems count as integrity of the artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) => 2,
            EngineError::Shape(_) => 4,
            EngineError::Numeric(_) => 3,
            EngineError::Integrity(_) => 4,
            EngineError::Io(_) => 4,
            EngineError::Serde(_) => 4,
        }
    }
}
