use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time step {dt} exceeds the stability bound {bound}")]
    UnstableStep { dt: f64, bound: f64 },
    #[error("{0} is not defined for this boundary condition")]
    WrongBoundary(&'static str),
    #[error("time {t} outside the recorded horizon [0, {horizon}]")]
    OutsideHorizon { t: f64, horizon: f64 },
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("cannot build coupling: {0}")]
    Coupling(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
