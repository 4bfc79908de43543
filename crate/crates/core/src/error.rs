use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building, solving, or evaluating
/// stability certificates.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions do not fit together.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input contains NaN or infinite entries.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// System data failed validation; the message lists every violation.
    #[error("invalid system data: {0}")]
    InvalidSystem(String),

    /// A selection `s` is not a member of the step set at the given input.
    #[error("selection outside step set at component {index}: u = {u}, s = {s}")]
    SelectionOutsideStepSet { index: usize, u: f64, s: f64 },

    /// A matrix that must be diagonal has an off-diagonal entry.
    #[error("matrix {0} is not diagonal")]
    NotDiagonal(String),

    /// A matrix that must be symmetric deviates beyond tolerance.
    #[error("matrix {name} is not symmetric: max asymmetry {asymmetry:e}")]
    NotSymmetric { name: String, asymmetry: f64 },

    /// The relation matrix `W` has a trivial kernel, so the projected
    /// feasibility conditions are vacuous.
    #[error("relation matrix has a trivial kernel; the projected conditions are vacuous")]
    DegenerateKernel,

    /// The operation needs a planar state space.
    #[error("state dimension is {0}, but this operation needs n_p = 2")]
    NonPlanarState(usize),

    /// A trajectory is too short or too small in norm to fit a decay rate.
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    /// The solver hit its wall-clock limit.
    #[error("solver timed out after {0} s")]
    SolverTimeout(f64),

    /// The solver failed in a way that is neither feasibility nor
    /// infeasibility.
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// A configuration or data file is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// An SDPA-format file is malformed.
    #[error("sdpa format error: {0}")]
    SdpaFormat(String),

    /// The problem has nothing to solve or export.
    #[error("empty problem: {0}")]
    EmptyProblem(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
