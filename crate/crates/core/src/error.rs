use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WrdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WrdError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("rank error: {0}")]
    Rank(String),
    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("vocabulary error: token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("instance error: {0}")]
    Instance(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate sentence: {0}")]
    Degenerate(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite loss at step {step} (batch instances {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl WrdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WrdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        WrdError::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage/configuration/alignment problems, 1 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            WrdError::Config(_) | WrdError::Usage(_) | WrdError::Alignment(_) | WrdError::Input(_) => 2,
            _ => 1,
        }
    }
}
