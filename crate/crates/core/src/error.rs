use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LynxError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LynxError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("manifest line {line}{}: {message}", field_suffix(field))]
    Manifest {
        line: usize,
        field: Option<String>,
        message: String,
    },

    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage scheduling: {0}")]
    Schedule(String),

    #[error("no usable frames: {0}")]
    NoFace(String),

    #[error("judge transport failed after {attempts} attempts: {message}")]
    JudgeTransport { attempts: usize, message: String },

    #[error("judge response rejected: {0}")]
    JudgeResponse(String),

    #[error("aggregation: {0}")]
    Aggregate(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn field_suffix(field: &Option<String>) -> String {
    field.as_ref().map(|f| format!(", field `{f}`")).unwrap_or_default()
}

impl LynxError {
    pub fn dims(msg: impl Into<String>) -> Self {
        LynxError::DimensionMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        LynxError::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LynxError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
