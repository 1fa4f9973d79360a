//! Crate-wide error type with stable, machine-readable error classes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("incompatible-checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("corruption: {0}")]
    Corruption(String),
    #[error("unsupported-version: {0}")]
    UnsupportedVersion(String),
    #[error("training: {0}")]
    Training(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short class tag used for single-line CLI error reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            Error::Corruption(_) => "corruption",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// Process exit code: 2 = bad config/arguments, 3 = checkpoint trouble,
    /// 4 = runtime/training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::IncompatibleCheckpoint(_)
            | Error::Corruption(_)
            | Error::UnsupportedVersion(_) => 3,
            Error::Training(_) | Error::Io(_) | Error::Image(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[macro_export]
macro_rules! bail_invalid {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::InvalidArgument(format!($($arg)*)))
    };
}
