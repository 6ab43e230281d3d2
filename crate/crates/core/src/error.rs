use std::path::PathBuf;

use msclip_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MsClipError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
}

pub type Result<T, E = MsClipError> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> MsClipError {
    MsClipError::Config(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> MsClipError {
    MsClipError::Input(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MsClipError {
    let path = path.into();
    move |source| MsClipError::Io { path, source }
}
