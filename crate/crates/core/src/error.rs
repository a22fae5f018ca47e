use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },

    /// A named argument or configuration key failed validation.
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 validation, 2 I/O, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Timestep { .. }
            | Error::Invalid { .. }
            | Error::Protocol(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::NonFinite { .. } => 3,
        }
    }
}
