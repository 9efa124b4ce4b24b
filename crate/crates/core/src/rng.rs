//! Seeding discipline.
//!
//! Every random quantity is drawn from a ChaCha8 stream addressed by
//! (master seed, domain, index). Parallel loops give each row/member its own
//! stream, so serial and parallel runs produce identical bits.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream domains keep substreams from colliding across uses of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    EmbeddingU = 1,
    EmbeddingV = 2,
    BiasU = 3,
    BiasV = 4,
    Counts = 5,
    Noise = 6,
    Init = 7,
    SeEnsemble = 8,
    Subspace = 9,
    Subsample = 10,
}

/// RNG for substream `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) ^ index);
    rng
}

pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
}

/// Matrix with i.i.d. N(0, scale^2) entries, one stream per row.
pub fn gaussian_matrix(seed: u64, domain: Domain, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let mut rng = stream(seed, domain, i as u64);
        for x in row.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x = scale * g;
        }
    }
    out
}

pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}
