//! Error type shared by every module in the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the pipeline.
///
/// `Precondition`, `DegenerateInput`, `Format` and `Config` describe bad
/// inputs and map to exit code 1 in the CLI; `NonFinite` and `Internal`
/// indicate a broken computation and map to exit code 2.
#[derive(Debug)]
pub enum Error {
    /// An operation was called with arguments violating its contract
    /// (shape mismatch, out-of-range index, too few points).
    Precondition(String),
    /// Structurally valid input that the operation cannot act on
    /// (all-invalid depth map, zero-norm row fed to normalization).
    DegenerateInput(String),
    /// A forward value or loss came out NaN/Inf.
    NonFinite(String),
    /// Corrupt or unsupported file contents (bad magic, version, truncation).
    Format(String),
    /// Invalid configuration value or unknown config key.
    Config(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Invariant violation that indicates a bug rather than bad input.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Config(err.to_string())
    }
}

impl Error {
    /// Exit code the CLI reports for this error kind: 1 for bad input,
    /// 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Precondition(_)
            | Error::DegenerateInput(_)
            | Error::Format(_)
            | Error::Config(_)
            | Error::Io(_) => 1,
            Error::NonFinite(_) | Error::Internal(_) => 2,
        }
    }
}
