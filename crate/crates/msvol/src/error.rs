//! Shared error type for the whole crate.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by image I/O, volume construction, regression and training.
#[derive(Debug)]
pub enum Error {
    /// File could not be read or written; keeps the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed or unsupported file contents.
    Format(String),
    /// Invalid numeric parameter (sigma, sharpness, learning rate, ...).
    Config(String),
    /// Dimension mismatch or degenerate size.
    Size(String),
    /// Evaluation impossible (e.g. no jointly valid pixels).
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::Format(msg) => write!(f, "format error: {}", msg),
            Error::Config(msg) => write!(f, "config error: {}", msg),
            Error::Size(msg) => write!(f, "size error: {}", msg),
            Error::Eval(msg) => write!(f, "evaluation error: {}", msg),
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

impl Error {
    /// Convenience constructor tagging an `io::Error` with its path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
