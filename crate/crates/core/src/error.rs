use thiserror::Error;

/// Errors surfaced by the estimators, oracles, simulators and learners.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MevError {
    #[error("insufficient sample: need at least {needed} values, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("{0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge (best estimate {estimate}, error estimate {error})")]
    QuadratureFailure { estimate: f64, error: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid action {action} for state with {count} actions")]
    InvalidAction { action: usize, count: usize },

    #[error("step called on a terminal state")]
    TerminalStep,

    #[error("no state-action-return tuples were collected")]
    NoTuples,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, MevError>;

pub(crate) fn invalid(msg: impl Into<String>) -> MevError {
    MevError::InvalidParameter(msg.into())
}
