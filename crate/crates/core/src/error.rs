use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numerical estimate could not be formed (singular system, no convergence).
    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// A pipeline stage was asked to run before the stage producing its inputs.
    #[error("missing artifact {artifact}: run the `{stage}` stage first")]
    Dependency { stage: &'static str, artifact: PathBuf },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI. Zero is reserved for success.
    pub fn category_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Shape { .. } => 2,
            Error::Dependency { .. } => 3,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Image(_) => 4,
            Error::Estimation(_) => 5,
        }
    }
}
