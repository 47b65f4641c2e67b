use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape inference or binding failed at a graph node.
    #[error("shape error at node {node}: {msg}")]
    Shape { node: usize, msg: String },
    /// A graph node produced NaN or Inf.
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    /// Numeric failure outside a graph (division guard, divergent loss).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed file content.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for errors that stem from numeric blow-ups rather than misuse.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
