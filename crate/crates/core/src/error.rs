use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TssError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TssError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no classification head for task {0}")]
    MissingHead(usize),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("malformed payload: {0}")]
    Format(String),

    #[error("numerical abort on task {task}: {reason}")]
    Numerical { task: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TssError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TssError::Io {
            path: path.into(),
            source,
        }
    }
}
