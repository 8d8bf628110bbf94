//! Crate-wide error type and result alias.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted across the pipeline.
///
/// `Validation`, `Shape`, `Degenerate` and `Config` map to CLI exit code 1;
/// everything else maps to exit code 2.
#[derive(Debug)]
pub enum Error {
    /// A precondition on inputs or configuration was violated.
    Validation(String),
    /// Tensor shapes are incompatible for the requested operation.
    Shape { expected: String, got: String },
    /// Numerically degenerate input (e.g. zero-norm vector fed to cosine similarity).
    Degenerate(String),
    /// A config file could not be parsed or contained unknown keys.
    Config(String),
    /// A non-finite value surfaced where the pipeline requires finite numbers.
    NonFinite(String),
    /// Filesystem failure with the path that triggered it.
    Io { path: String, source: std::io::Error },
    /// Runtime failure that is not a user input problem.
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than internal failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Shape { .. } | Error::Degenerate(_) | Error::Config(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Shape { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io { path, source } => write!(f, "io error at {path}: {source}"),
            Error::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
