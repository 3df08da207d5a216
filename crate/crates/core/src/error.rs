use thiserror::Error;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time step {delta} is not below the one-sided Lipschitz limit {limit}")]
    DeltaTooLarge { delta: f64, limit: f64 },

    #[error("implicit solve did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("all {n_paths} paths blew up by t = {time}")]
    AllPathsBlewUp { n_paths: usize, time: f64 },

    #[error("step {coarse} is not an integer multiple of step {fine}")]
    NonDivisibleDelta { coarse: f64, fine: f64 },

    #[error("need >= 3 deltas for an order fit, got {0}")]
    InsufficientDeltas(usize),

    #[error("problem `{0}` does not expose the derivative callbacks required here")]
    MissingDerivatives(String),

    #[error("analysis failed: {0}")]
    Analysis(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
