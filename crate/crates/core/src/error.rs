use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid record: {0}")]
    Validation(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint does not match dataset manifest (checkpoint {checkpoint}, dataset {dataset})")]
    ManifestMismatch { checkpoint: String, dataset: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
