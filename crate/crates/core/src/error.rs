//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rate exponent overflow at entry ({i}, {j}): exponent {exponent}")]
    ChannelOverflow { i: usize, j: usize, exponent: f64 },

    #[error("count matrix has no observations (Z_tot = 0)")]
    EmptyData,

    #[error("degenerate marginal sums: rows {rows:?}, cols {cols:?}")]
    DegenerateSums { rows: Vec<usize>, cols: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("conditioning failure: {0}")]
    Conditioning(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite values detected at iteration {iteration} in {location}")]
    Divergence { iteration: usize, location: String },

    #[error("step size collapsed below {0:.3e} without loss decrease")]
    StepSize(f64),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
