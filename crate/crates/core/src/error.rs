use thiserror::Error;

use crate::solver::PathSample;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate element: isoparametric Jacobian determinant {det_j:e} is not positive")]
    DegenerateElement { det_j: f64 },

    #[error("inadmissible strain: {0}")]
    InadmissibleStrain(String),

    #[error("inadmissible kinematics: macro strain Jacobian is singular")]
    InadmissibleKinematics,

    #[error("rank deficiency: {0}")]
    RankDeficiency(String),

    #[error("structural singularity: {0}")]
    StructuralSingularity(String),

    #[error("Newton iteration did not converge after {iterations} iterations (relative residual {residual:e})")]
    StepFailure { iterations: usize, residual: f64 },

    #[error("load path failed at load factor {load_factor}: {reason}")]
    PathFailure { load_factor: f64, reason: String, last_converged: Option<Box<PathSample>> },

    #[error("stale state: {0}")]
    StaleState(String),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("optimization aborted at iteration {iteration}: {reason}")]
    OptimizationAborted { iteration: usize, reason: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
