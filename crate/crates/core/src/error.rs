//! Crate-wide error type.
//!
//! Kernel-level shape violations panic with messages naming both shapes
//! (programmer contract); everything reachable from user input — file I/O,
//! malformed configs, length bounds, missing prerequisites — returns
//! [`Error`]. [`ErrorKind`] distinguishes contract violations (CLI exit 1)
//! from config/argument problems (CLI exit 2).

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Violated runtime contract: bad data, failed invariant, unusable model.
    Contract,
    /// Bad configuration or arguments: missing files, invalid flags.
    Config,
}

#[derive(Debug)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
}

impl Error {
    pub fn contract(message: impl Into<String>) -> Self {
        Error { kind: ErrorKind::Contract, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error { kind: ErrorKind::Config, message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ErrorKind::Contract => write!(f, "contract error: {}", self.message),
            ErrorKind::Config => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::config(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::config(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
