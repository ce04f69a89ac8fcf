//! Error type shared across the toolkit.

use thiserror::Error;

/// Unified error for every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum CdecError {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric update produced NaN or Inf.
    #[error("numeric divergence at iteration {iter}: {context}")]
    Diverged { iter: usize, context: String },

    /// A file did not match its expected binary or text format.
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    /// Underlying I/O failure, with the path when one is known.
    #[error("i/o error{}: {source}", path.as_deref().map(|p| format!(" at {p}")).unwrap_or_default())]
    Io {
        path: Option<String>,
        #[source]
        source: std::io::Error,
    },
}

impl From<std::io::Error> for CdecError {
    fn from(source: std::io::Error) -> Self {
        CdecError::Io { path: None, source }
    }
}

pub type Result<T> = std::result::Result<T, CdecError>;

impl CdecError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CdecError::InvalidArgument(msg.into())
    }

    pub fn io_at(path: impl Into<String>, source: std::io::Error) -> Self {
        CdecError::Io {
            path: Some(path.into()),
            source,
        }
    }
}
