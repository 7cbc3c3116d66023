use thiserror::Error;

/// Errors surfaced by the reconstruction library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("empty image: dimensions must be at least 1x1")]
    EmptyImage,

    #[error("multicoil data needs at least one coil")]
    NoCoils,

    #[error("coil {index} has shape {got:?}, expected {expected:?}")]
    CoilShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("ACS region {0} does not fit inside the grid")]
    AcsOutOfBounds(String),

    #[error("mask entry inside the ACS region is not sampled at ({0}, {1})")]
    AcsNotSampled(usize, usize),

    #[error("infeasible acceleration: {0}")]
    InfeasibleAf(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "calibration system is underdetermined: {equations} equations for {unknowns} unknowns \
         (enlarge the ACS region or shrink the kernel)"
    )]
    UnderdeterminedCalibration { equations: usize, unknowns: usize },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("block matching window holds {found} candidates, need {needed}")]
    WindowTooSmall { found: usize, needed: usize },

    #[error("patch group list does not align with the grouping ({0})")]
    GroupMismatch(String),

    #[error("aggregation coverage hole: pixel ({0}, {1}) is touched by no patch")]
    CoverageHole(usize, usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("solver diverged at iteration {iter}: state is non-finite")]
    Diverged { iter: usize },
}

impl From<ndarray_linalg::error::LinalgError> for CoreError {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        CoreError::Linalg(e.to_string())
    }
}
