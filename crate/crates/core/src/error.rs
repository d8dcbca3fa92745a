use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),

    #[error("non-finite value during {stage}: {detail}")]
    Divergence { stage: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,

    #[error("bad magic bytes, not a dataset file")]
    BadMagic,

    #[error("unsupported dataset format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated dataset: expected {expected} rows, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("environment config hash mismatch: dataset has {found}, config is {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("field layout mismatch: {0}")]
    Layout(String),

    #[error("transition {index} violates invariant: {reason}")]
    Invariant { index: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn divergence(stage: &str, detail: impl Into<String>) -> Self {
        Error::Divergence {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }
}

/// Process exit codes used by the command-line tool.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => exit::CONFIG,
            Error::Dataset(_) | Error::Shape(_) => exit::DATA,
            Error::Divergence { .. } => exit::DIVERGENCE,
            Error::Checkpoint(_) | Error::Io { .. } | Error::Json(_) => exit::OTHER,
        }
    }
}
