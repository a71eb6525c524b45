use thiserror::Error;

/// Errors reported by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("step law has nonzero mean ({mean1}/{den}, {mean2}/{den})")]
    NonZeroMean { mean1: i128, mean2: i128, den: i128 },

    #[error("step law is reducible: its support does not generate the full lattice")]
    Reducible,

    #[error("step law has degenerate covariance (support lies on a line)")]
    DegenerateCovariance,

    #[error(
        "characteristic function attains 1 away from the origin \
         (support generates a proper sublattice of index {index})"
    )]
    CharFnUnitCircleZero { index: i128 },

    #[error("invalid step law: {0}")]
    InvalidLaw(String),

    #[error("start point {start:?} lies outside the window")]
    StartOutsideWindow { start: (i64, i64) },

    #[error("window too small: {reason}")]
    WindowTooSmall { reason: String },

    #[error("quadrature did not converge for x=({x1},{x2}): best error {achieved:.3e} > tol {tol:.3e}")]
    QuadratureNonConvergent { x1: i64, x2: i64, achieved: f64, tol: f64 },

    #[error("relaxation solver did not converge: residual {residual:.3e} after {iterations} sweeps")]
    SolverNotConverged { residual: f64, iterations: u64 },

    #[error("radius {given} too small: need at least {needed}")]
    RadiusTooSmall { given: i64, needed: i64 },

    #[error("killing set leaves the exterior disconnected near {pocket:?}")]
    ExteriorNotIrreducible { pocket: (i64, i64) },

    #[error("killing set invalid: {0}")]
    InvalidKillingSet(String),

    #[error("truncated fraction {fraction:.3e} exceeds the allowed {limit:.3e}")]
    ExcessTruncation { fraction: f64, limit: f64 },

    #[error("all requested grid rows vanish by parity")]
    ParityZero,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
