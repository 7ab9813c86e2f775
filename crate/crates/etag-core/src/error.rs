//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (lengths, matrix dims, image sizes).
    #[error("shape error: {0}")]
    Shape(String),

    /// A value is outside the operation's documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The call sequence violates a contract (e.g. incremental loss at task 0).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed binary input; `offset` points at the offending byte.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A checked evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Training hit a non-finite loss; carries enough context to debug the run.
    #[error("non-finite loss in task {task} ({phase}), epoch {epoch}, step {step}: {detail}")]
    NanAbort {
        task: usize,
        phase: String,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
