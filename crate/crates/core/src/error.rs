use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no category files found in {0}")]
    NoCategoryFiles(PathBuf),

    #[error("orphan product ids in {file}: {ids:?}")]
    OrphanProducts { file: PathBuf, ids: Vec<String> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown product id {0:?}")]
    UnknownProduct(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no gold output known for the given instruction and input")]
    UnknownSample,

    #[error("operation not supported by this backend: {0}")]
    Unsupported(String),

    #[error("transport error after {attempts} attempt(s): status {status:?}: {message}")]
    Transport {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },

    #[error("request budget exhausted: {0}")]
    Throttled(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
