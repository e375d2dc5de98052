use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("closed-loop matrix is not Schur stable (spectral radius {radius})")]
    Unstable { radius: f64 },

    /// The terminal-gain SDP or the a-posteriori margin check failed.
    #[error(
        "probability level too high for constraint/covariance: no stabilising gain keeps \
         b_j - sqrt(p~_j)*||Sigma_inf^(1/2) C_K^T L_j^T|| above the margin ({0})"
    )]
    DesignInfeasible(String),

    #[error(
        "terminal set search not terminated: {stage} reached its cap of {cap} without a \
         certificate; the S-procedure containment test is lossy, so finite determination \
         may hold without being provable here (raise the cap or loosen the LMI tolerance)"
    )]
    NotTerminated { stage: &'static str, cap: usize },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("optimisation problem infeasible: {0}")]
    Infeasible(String),

    /// A receding-horizon program failed even after the relaxed retry.
    #[error("controller hard fault at k={k}: {detail}")]
    HardFault {
        k: usize,
        detail: String,
        /// JSON dump of the reconditioned candidate, if one existed.
        candidate: Option<String>,
    },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("missing disturbance history: need {needed} samples, got {got}")]
    MissingHistory { needed: usize, got: usize },

    #[error("state required for k >= N")]
    MissingState,

    #[error("no previous optimum stored")]
    MissingPrevious,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}
