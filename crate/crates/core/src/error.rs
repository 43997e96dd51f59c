use std::io;

use thiserror::Error;

/// Errors raised by the probing, scoring and localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("file truncated{}", match .record {
        Some(r) => format!(" inside record {r}"),
        None => " inside header".to_string(),
    })]
    Truncated { record: Option<u64> },

    #[error("invalid data in record {record}: {reason}")]
    Data { record: u64, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("class {class} has {count} samples, at least {required} required")]
    InsufficientClassData {
        class: &'static str,
        count: usize,
        required: usize,
    },

    #[error("only one class present ({0})")]
    SingleClass(&'static str),

    #[error("at least 2 layers required, got {0}")]
    InsufficientLayers(usize),

    #[error("at least 2 calibration scores required, got {0}")]
    InsufficientCalibration(usize),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// True for errors caused by unreadable or malformed inputs, as opposed
    /// to well-formed inputs that violate a data precondition.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Json(_)
                | Error::Format(_)
                | Error::Truncated { .. }
                | Error::Data { .. }
                | Error::Manifest(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
