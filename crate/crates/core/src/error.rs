use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AsuError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AsuError {
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition (non-scalar loss, fully masked
    /// attention row, empty region, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("category conflict for unit {unit:?}: {first} vs {second}")]
    CategoryConflict {
        unit: String,
        first: String,
        second: String,
    },

    #[error("embedding file: {0}")]
    EmbeddingFile(#[from] EmbeddingFileError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failure modes of the binary embedding container, one variant per corruption class.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbeddingFileError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("name count {names} does not match row count {rows}")]
    NameCount { names: usize, rows: usize },
    #[error("malformed names block: {0}")]
    Names(String),
}

impl EmbeddingFileError {
    /// Stable numeric code for each corruption class.
    pub fn code(&self) -> u8 {
        match self {
            EmbeddingFileError::BadMagic => 1,
            EmbeddingFileError::Version(_) => 2,
            EmbeddingFileError::Truncated { .. } => 3,
            EmbeddingFileError::NameCount { .. } => 4,
            EmbeddingFileError::Names(_) => 5,
        }
    }
}

impl AsuError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsuError::Io {
            path: path.into(),
            source,
        }
    }
}
