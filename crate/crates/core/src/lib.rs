//! Biased low-rank AMP for Poisson count embeddings.
//!
//! Pipeline: generate (or ingest) a nonnegative count matrix, estimate the
//! row/column bias terms by frequency counting, build the scaled Fisher-score
//! observation, then factor it with the biased low-rank AMP iteration. A
//! Monte-Carlo state-evolution recursion predicts the per-iteration error
//! statistics of the iteration, and spectral / gradient-descent baselines plus
//! shared metrics support the experiment runner in the companion CLI crate.

pub mod amp;
pub mod baselines;
pub mod bias;
pub mod denoise;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod poisson;
pub mod rng;
pub mod scorechannel;
pub mod se;

pub use error::{Error, Result};
