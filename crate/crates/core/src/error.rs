//! Error type shared by every module of the crate.
//!
//! Variants are grouped by the category an operator needs to act on: bad
//! configuration, filesystem trouble, a training run that went numerically
//! wrong, or a caller breaking an API contract.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but its content is not what the reader expected.
    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    /// Numerical failure during optimisation.
    #[error("training failed: {0}")]
    Training(String),

    /// Caller passed arguments that violate an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Operation invoked in a state that does not allow it.
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Coarse error categories, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Training,
    Contract,
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.to_string(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::Format { .. } => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Training(_) => ErrorCategory::Training,
            Error::Contract(_) | Error::Protocol(_) => ErrorCategory::Contract,
        }
    }
}

/// Adds the offending path to IO results.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
