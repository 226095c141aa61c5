use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` covers structurally invalid setups (bad dimensions, unsupported
/// bit widths); `Input` covers runtime data that violates an operation's
/// preconditions (length mismatches, out-of-range tokens, oversized oracle
/// requests); `Checkpoint` covers malformed model files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
