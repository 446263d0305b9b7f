use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("session too short: {samples} samples, need at least {required}")]
    TooShort { samples: usize, required: usize },

    #[error("unknown synthetic class id {0}")]
    UnknownClass(usize),

    #[error("unknown electrode label {0:?}")]
    UnknownElectrode(String),

    #[error("unknown task category {0:?}")]
    UnknownTaskCategory(String),

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnknownVersion { found: u32, expected: u32 },

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask precondition violated: {0}")]
    Mask(String),

    #[error("class {0} has no true samples")]
    EmptyClass(usize),

    #[error("downstream task {0:?} is not registered")]
    UnregisteredTask(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
