use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("linear solver did not converge after {iterations} iterations (residual {residual:e})")]
    LinearNoConvergence { iterations: usize, residual: f64 },
    #[error("active set iteration did not converge after {iterations} iterations (residual {residual:e})")]
    ActiveSetNoConvergence { iterations: usize, residual: f64 },
    #[error("step {step}: phase field leaves [0, 1] by {excess:e}")]
    BoundViolation { step: usize, excess: f64 },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
