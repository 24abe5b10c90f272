use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error in {location}: {message}")]
    Numeric { location: String, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error(
        "checkpoint was written with config hash {found}, current config hashes to {expected}"
    )]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigHashMismatch { .. } | Error::Parse { .. } => 2,
            Error::Data(_)
            | Error::Shape(_)
            | Error::Domain(_)
            | Error::Provider(_)
            | Error::Checkpoint(_)
            | Error::Image { .. }
            | Error::Json(_) => 3,
            Error::Numeric { .. } => 4,
            Error::State(_) | Error::Io { .. } => 1,
        }
    }
}
