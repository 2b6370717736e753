use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A value failed validation; `field` names the offending attribute when known.
    #[error("validation error{}: {message}", field.as_ref().map(|f| format!(" in `{f}`")).unwrap_or_default())]
    Validation {
        field: Option<String>,
        message: String,
    },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("incomplete sequence: {0}")]
    IncompleteSequence(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion failed for {} line(s): {}", .0.len(), summarize_lines(.0))]
    Ingestion(Vec<(usize, String)>),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("not enough samples: {0}")]
    SampleSize(String),

    #[error("training diverged at step {step} (lr {lr}, grad norm {grad_norm}): {detail}")]
    Divergence {
        step: u64,
        lr: f64,
        grad_norm: f64,
        detail: String,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn summarize_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .take(5)
        .map(|(n, msg)| format!("line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
