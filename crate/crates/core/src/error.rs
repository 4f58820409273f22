use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClearError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClearError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("ambiguous query: tag {tag} is single-valued but attributes {indices:?} are all active")]
    AmbiguousQuery { tag: String, indices: Vec<usize> },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("unknown category for person {0}")]
    UnknownCategory(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema mismatch: expected hash {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl ClearError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClearError::Io {
            path: path.into(),
            source,
        }
    }
}
