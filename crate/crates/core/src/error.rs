use thiserror::Error;

/// Errors raised by the solver toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("node {node} is not admissible: {reason}")]
    Inadmissible { node: usize, reason: String },

    #[error("Newton iteration did not converge in {iterations} iterations (best residual {best_residual:.3e})")]
    NonConvergence { iterations: usize, best_residual: f64 },

    #[error("Newton line search stagnated at residual {residual:.3e}")]
    Stagnation { residual: f64 },

    #[error("homotopy step fell below the minimum at t = {t:.6} ({cause})")]
    HomotopyFailure {
        t: f64,
        cause: String,
        trace: Box<Vec<crate::solver::HomotopyState>>,
    },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
