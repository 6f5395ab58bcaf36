//! Shared error type for the whole pipeline.
//!
//! Every fallible operation maps into one of five kinds so the CLI can turn
//! failures into stable exit codes (config 2, data 3, numeric 4, io/net 5).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or precondition violation caught before any work.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed, inconsistent, or missing data (datasets, checkpoints, replies).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or numeric contract violations during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Filesystem failures, annotated with the path involved.
    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    /// Teacher endpoint transport failure after retries were exhausted.
    #[error("network error: {0}")]
    Net(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn net(msg: impl Into<String>) -> Self {
        Error::Net(msg.into())
    }

    /// Stable process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io { .. } | Error::Net(_) => 5,
        }
    }

    /// Short machine-parseable kind tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Net(_) => "net",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
