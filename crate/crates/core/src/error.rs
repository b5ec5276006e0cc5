use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum CstError {
    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} payload bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CstError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CstError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite or diverging numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CstError::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, CstError>;
