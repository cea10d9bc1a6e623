use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Input violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// An exhaustive computation would exceed its configured bound.
    #[error("capacity exceeded: {what} needs {needed}, bound is {bound}")]
    Capacity {
        what: &'static str,
        needed: u64,
        bound: u64,
    },

    #[error("chain is reducible; closed classes: {closed_classes:?}")]
    Reducible { closed_classes: Vec<Vec<usize>> },

    #[error("payoff matrix is not a potential game (c != d); {0} requires c == d")]
    NonPotential(&'static str),

    #[error("linear solve failed: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
