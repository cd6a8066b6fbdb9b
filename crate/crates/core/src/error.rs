use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch} (data term {data_term}, penalty {penalty_term})")]
    Diverged {
        epoch: usize,
        data_term: f64,
        penalty_term: f64,
        dump: Option<PathBuf>,
    },

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures rooted in numerics (NaN, divergence, singular systems).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Diverged { .. })
    }

    /// True for failures rooted in on-disk data (bad headers, IO, malformed tables).
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Io { .. } | Error::Unsupported(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
