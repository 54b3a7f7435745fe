use thiserror::Error;

/// Errors raised by the solver, the metric schedules and the certificates.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("operator is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("operator is not positive definite (eigenvalues in [{min:e}, {max:e}])")]
    NotDefinite { min: f64, max: f64 },

    #[error("quadratic form evaluates to {0:e}; operator is not positive semidefinite")]
    NegativeForm(f64),

    #[error("operator is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("block list is empty")]
    EmptyBlocks,

    #[error("theta = {0} lies outside the open interval (0, (1 + sqrt 5) / 2)")]
    ThetaOutOfRange(f64),

    #[error("no feasible sigma found for theta = {0}")]
    NoFeasibleSigma(f64),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("schedule violates the metric sandwich condition at k = {k} ({family}_k to {family}_(k+1) moves by more than 1 + c_k)")]
    ScheduleViolation { k: usize, family: String },

    #[error("singular subproblem: {0}")]
    SingularSystem(String),

    #[error("unsupported subproblem: {0}")]
    UnsupportedSubproblem(String),

    #[error("subproblem optimality check failed: {0}")]
    SubproblemCheck(String),

    #[error("point outside the domain: {0}")]
    OutsideDomain(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("reference solver reached the iteration cap ({iterations}) with KKT residual {residual:e}")]
    ReferenceCap { iterations: usize, residual: f64 },

    #[error("iterate {k} is inconsistent: {reason}")]
    InconsistentIterate { k: usize, reason: String },

    #[error("invalid iteration index {k}: {reason}")]
    InvalidIndex { k: usize, reason: String },

    #[error("rate bounds are required for this certificate")]
    MissingBounds,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
