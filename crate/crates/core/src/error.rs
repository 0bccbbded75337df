use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("kernel is singular at the origin")]
    Singular,
    #[error("coincident atoms at index {0} and {1}")]
    CoincidentAtoms(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid layouts differ")]
    LayoutMismatch,
    #[error("negative density {value} in cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },
    #[error("point or support leaves the grid box")]
    OutsideGrid,
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
