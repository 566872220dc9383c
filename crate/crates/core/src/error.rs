//! Crate-wide error type.

/// Errors surfaced by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value is out of range or otherwise malformed.
    #[error("input error: {0}")]
    Input(String),
    /// Two components do not fit together (shape mismatch, bad stage
    /// ordering, unreadable experiment configuration, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric invariant broke (non-finite gradient or logit); the
    /// offending update is refused.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Persistence failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A checkpoint, task file or config file does not parse.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
