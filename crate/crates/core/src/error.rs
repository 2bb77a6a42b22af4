use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that cannot be combined.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-side precondition does not hold.
    #[error("{0}")]
    Contract(String),

    #[error("{op}: degenerate input ({reason})")]
    Degenerate { op: &'static str, reason: String },

    #[error("{op}: non-finite value produced in forward pass")]
    NonFinite { op: &'static str },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// Malformed on-disk input (manifest, image, checkpoint, CSV).
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Contract(_) | Error::Config { .. } | Error::Parse { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
