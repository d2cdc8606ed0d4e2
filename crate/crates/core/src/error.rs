use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("singular Jacobian at x = {x:?} (condition estimate {condition:e})")]
    SingularJacobian { x: Vec<f64>, condition: f64 },

    #[error("information matrix not positive definite at x = {x:?} (leading minor {minor})")]
    IndefiniteInformation { x: Vec<f64>, minor: usize },

    #[error("non-finite evaluation at x = {x:?}")]
    NonFiniteEvaluation { x: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid too small for requested Gaussian: suggested extents lower = {suggested_lower:?}, upper = {suggested_upper:?}")]
    GridTooSmall {
        suggested_lower: Vec<f64>,
        suggested_upper: Vec<f64>,
    },

    #[error("time step {dt:e} violates CFL bound {max_dt:e}")]
    Stability { dt: f64, max_dt: f64 },

    #[error("scheme produced negative density {value:e} in cell {cell}")]
    Scheme { cell: usize, value: f64 },

    #[error("no convergence after {iterations} iterations (score norm {score_norm:e})")]
    NonConvergence {
        last: Vec<f64>,
        iterations: usize,
        score_norm: f64,
    },

    #[error("design matrix has rank {rank} < {p}")]
    RankDeficient { rank: usize, p: usize },

    #[error("state left the working domain at t = {time} (x = {position:?})")]
    DomainEscape { time: f64, position: Vec<f64> },

    #[error("at t = {time}: {source}")]
    AtTime { time: f64, source: Box<Error> },

    #[error("empty particle ensemble")]
    EmptyEnsemble,

    #[error("point {position:?} lies outside the grid")]
    OutsideGrid { position: Vec<f64> },

    #[error("density has zero mass")]
    ZeroMass,

    #[error("grids differ")]
    GridMismatch,

    #[error("covariance matrix is not symmetric positive definite")]
    NotSpd,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn at_time(self, time: f64) -> Self {
        match self {
            e @ (Error::AtTime { .. } | Error::DomainEscape { .. }) => e,
            e => Error::AtTime {
                time,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping `AtTime` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularJacobian { .. }
                | Error::IndefiniteInformation { .. }
                | Error::NonFiniteEvaluation { .. }
                | Error::Stability { .. }
                | Error::Scheme { .. }
                | Error::NonConvergence { .. }
                | Error::DomainEscape { .. }
                | Error::ZeroMass
                | Error::NotSpd
                | Error::GridTooSmall { .. }
                | Error::RankDeficient { .. }
        )
    }
}

pub(crate) fn to_vec(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}
