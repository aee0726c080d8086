use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent caller input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Coordinate or vector length disagreement.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A symmetric factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {index} = {value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },

    /// The interaction graph does not span all nodes.
    #[error("interaction graph is disconnected; components: {0:?}")]
    DisconnectedGraph(Vec<Vec<usize>>),

    /// An iterative solver ran out of iterations. Carries the residual
    /// norm history, most recent last.
    #[error("solver did not converge after {iterations} iterations (last residual {last:e})",
            iterations = .residuals.len(), last = .residuals.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { residuals: Vec<f64> },

    /// Hard solver failure (singular system, model misspecification).
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// Scenario failed `validate_scenario`.
    #[error("scenario validation failed: {0}")]
    InvalidScenario(String),

    /// Distributed and centralized results disagree beyond contract.
    #[error("tolerance exceeded: {0}")]
    ToleranceExceeded(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 tolerance/validation failure,
    /// 2 solver failure, 3 bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ToleranceExceeded(_) | Error::InvalidScenario(_) => 1,
            Error::NonConvergence { .. }
            | Error::SolverFailure(_)
            | Error::NotPositiveDefinite { .. } => 2,
            _ => 3,
        }
    }
}
