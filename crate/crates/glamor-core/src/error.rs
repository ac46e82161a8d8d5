//! Error type shared by every module in the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, losses, samplers, and file formats.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or matrix shapes do not line up for the requested op.
    ShapeMismatch { context: String },
    /// A configuration value is out of its documented range.
    InvalidConfig { context: String },
    /// An input is too degenerate to process (e.g. a near-zero vector).
    DegenerateInput { context: String },
    /// A mining batch contains an identity with fewer than two instances.
    UnminableIdentity { identity: String },
    /// A mining batch contains a single identity.
    SingleIdentityBatch,
    /// A computation produced or observed a non-finite value.
    NonFinite { context: String },
    /// A text file could not be parsed; `line` is 1-based.
    Parse { line: usize, message: String },
    /// Underlying I/O failure.
    Io { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::InvalidConfig { context } => write!(f, "invalid configuration: {context}"),
            Error::DegenerateInput { context } => write!(f, "degenerate input: {context}"),
            Error::UnminableIdentity { identity } => {
                write!(f, "identity {identity} has a single instance in the batch")
            }
            Error::SingleIdentityBatch => {
                write!(f, "batch contains a single identity; mining needs at least two")
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Io { message } => write!(f, "io error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            message: e.to_string(),
        }
    }
}

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
        }
    }

    pub fn config(context: impl Into<String>) -> Self {
        Error::InvalidConfig {
            context: context.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
