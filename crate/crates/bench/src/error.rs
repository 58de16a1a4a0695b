use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] topdown_core::Error),
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("measurement mismatch: {0}")]
    Mismatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io { path: path.into(), source }
    }

    /// Configuration problems map to exit code 2, everything else to 3.
    pub fn is_config(&self) -> bool {
        use topdown_core::Error as E;
        match self {
            BenchError::Usage(_) | BenchError::Config(_) => true,
            BenchError::Core(e) => matches!(e, E::Config(_) | E::Usage(_)),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
