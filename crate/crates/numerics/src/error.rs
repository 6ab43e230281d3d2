use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("{op}: numeric error: {msg}")]
    Numeric { op: &'static str, msg: String },
    #[error("state error: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

pub(crate) fn config_err(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::Config { op, msg: msg.into() }
}
