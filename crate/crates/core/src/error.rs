use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("matrix of dimension {dim} is not positive definite (after jitter ladder)")]
    NotPositiveDefinite { dim: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("eigendecomposition did not converge for a {dim}x{dim} matrix")]
    ConvergenceFailure { dim: usize },

    #[error("conjugate gradients broke down at iteration {iteration}: curvature {curvature:e}")]
    BreakdownDetected { iteration: usize, curvature: f64 },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GpError::DimensionMismatch { expected, got, context })
    }
}
