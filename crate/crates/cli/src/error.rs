use std::path::PathBuf;

use axum::http::StatusCode;
use layoutgen::Error as CoreError;
use thiserror::Error;

pub type AppResult<T> = std::result::Result<T, AppError>;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const INTERNAL: i32 = 5;
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("malformed request: {0}")]
    Malformed(String),

    #[error("no route for {0}")]
    NotFound(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            AppError::Core(e) => match e {
                CoreError::InvalidInput(_) => "invalid_input",
                CoreError::Validation { .. } => "validation_error",
                CoreError::Capacity(_) => "capacity_exceeded",
                CoreError::Vocabulary(_) => "unknown_category",
                CoreError::IncompleteSequence(_) => "incomplete_sequence",
                CoreError::Checkpoint(_) => "bad_checkpoint",
                CoreError::Ingestion(_) => "ingestion_failed",
                CoreError::SampleSize(_) => "not_enough_samples",
                CoreError::Json(_) => "malformed_json",
                CoreError::Io { .. } => "io_error",
                CoreError::Divergence { .. } => "training_diverged",
                CoreError::Decode(_) | CoreError::Shape { .. } | CoreError::Contract(_) | CoreError::Numerical(_) => {
                    "internal_error"
                }
            },
            AppError::UnknownModel(_) => "unknown_model",
            AppError::Usage(_) => "usage_error",
            AppError::Malformed(_) => "malformed_json",
            AppError::NotFound(_) => "not_found",
            AppError::Io { .. } => "io_error",
            AppError::Internal(_) => "internal_error",
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            AppError::Core(CoreError::Validation { field, .. }) => field.as_deref(),
            _ => None,
        }
    }

    fn is_internal(&self) -> bool {
        self.code() == "internal_error" || self.code() == "training_diverged"
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => exit::USAGE,
            AppError::Io { .. } | AppError::Core(CoreError::Io { .. }) => exit::IO,
            e if e.is_internal() => exit::INTERNAL,
            _ => exit::VALIDATION,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            AppError::UnknownModel(_) | AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Io { .. } | AppError::Core(CoreError::Io { .. }) => StatusCode::INTERNAL_SERVER_ERROR,
            e if e.is_internal() => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }

    /// Message safe to send over the wire: internal failures are not echoed.
    pub fn public_message(&self) -> String {
        if self.status() == StatusCode::INTERNAL_SERVER_ERROR {
            "the server failed to process the request".into()
        } else {
            self.to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_map_to_exit_and_status() {
        let v = AppError::Core(CoreError::Validation {
            field: Some("elements[0].w".into()),
            message: "negative".into(),
        });
        assert_eq!(v.exit_code(), exit::VALIDATION);
        assert_eq!(v.status(), StatusCode::BAD_REQUEST);
        assert_eq!(v.field(), Some("elements[0].w"));

        let io = AppError::io("/nope", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(io.exit_code(), exit::IO);
        assert!(io.to_string().contains("/nope"));

        let internal = AppError::Core(CoreError::Contract("x".into()));
        assert_eq!(internal.exit_code(), exit::INTERNAL);
        assert_eq!(internal.status(), StatusCode::INTERNAL_SERVER_ERROR);
        assert!(!internal.public_message().contains("contract"));

        assert_eq!(AppError::UnknownModel("m".into()).status(), StatusCode::NOT_FOUND);
        assert_eq!(AppError::Usage("x".into()).exit_code(), exit::USAGE);
    }
}
