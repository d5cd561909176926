use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval-augmented SR pipeline.
#[derive(Debug, Error)]
pub enum RasrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),

    #[error("cannot normalize an all-zero vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate record id {0}")]
    DuplicateId(u64),

    #[error("index is empty")]
    EmptyIndex,

    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("category `{category}` has {count} images, at least 3 are required")]
    TooFewImages { category: String, count: usize },

    #[error("reference pool of category `{0}` is empty")]
    EmptyReferencePool(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("pairing error: {0}")]
    PairingError(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path:?}: {message}")]
    ImageCodec { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RasrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RasrError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = RasrError> = std::result::Result<T, E>;
