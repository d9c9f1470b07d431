//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// An index (token id, row, phase) out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or cross-field constraint.
    #[error("config error: {0}")]
    Config(String),

    /// NaN or Inf encountered in a forward/backward pass or parameter update.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A required artifact (dataset, checkpoint) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Malformed or corrupt file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 missing artifact, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
