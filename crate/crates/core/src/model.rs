//! Ground-truth generation and the Poisson / Gaussian-surrogate channels.
//!
//! A model holds embedding matrices U (m×d), V (n×d), bias vectors s_u, s_v
//! (r = e^s), and the rate scale λ₀. After normalization λ₀ = 1 and the
//! empirical mean of r_u is exactly 1; the removed mass is folded into r_v,
//! which leaves every pair rate λ_ij unchanged and makes the normalization a
//! runtime invariant instead of an asymptotic statement.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poisson::sample_poisson;
use crate::rng::{stream, Domain};
use crate::scorechannel::ScaledObservation;

/// Exponent bound for rates; beyond this exp() would drown everything in inf.
pub const MAX_LOG_RATE: f64 = 700.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingPrior {
    /// Per-coordinate variance of the Gaussian embedding coordinates.
    pub sigma2: f64,
    /// Fraction of coordinates zeroed per row; exactly round(rho·d) positions
    /// chosen uniformly per row.
    pub rho: f64,
}

impl EmbeddingPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "embedding variance must be positive, got {}",
                self.sigma2
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParameter(format!(
                "sparsity fraction must lie in [0,1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Number of zeroed coordinates per row at dimension d.
    pub fn zeros_per_row(&self, d: usize) -> usize {
        (self.rho * d as f64).round() as usize
    }

    /// Exact second moment of one coordinate after sparsification.
    pub fn coord_second_moment(&self, d: usize) -> f64 {
        let keep = 1.0 - self.zeros_per_row(d) as f64 / d as f64;
        self.sigma2 * keep
    }

    pub fn sample_row(&self, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let sd = self.sigma2.sqrt();
        let mut row: Vec<f64> = (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                sd * g
            })
            .collect();
        let nz = self.zeros_per_row(d);
        if nz > 0 {
            // Partial Fisher-Yates: first nz slots index the zeroed support.
            let mut idx: Vec<usize> = (0..d).collect();
            for t in 0..nz {
                let j = t + (rng.random::<u64>() as usize) % (d - t);
                idx.swap(t, j);
            }
            for &p in &idx[..nz] {
                row[p] = 0.0;
            }
        }
        row
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BiasPrior {
    /// s = shift + X with X ~ Exp(rate). Rates follow the rate convention,
    /// i.e. E(X) = 1/rate.
    ExpShift { rate: f64, shift: f64 },
    /// r_i = c0 · C_m / i^α with C_m fixed so the empirical mean of C_m/i^α
    /// is exactly 1 (ranks are assigned in index order).
    Zipf { alpha: f64, c0: f64 },
    /// s constant.
    Constant { value: f64 },
}

impl BiasPrior {
    pub fn validate(&self) -> Result<()> {
        match self {
            BiasPrior::ExpShift { rate, shift } => {
                if !(rate > &0.0) || !rate.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "exponential rate must be positive, got {rate}"
                    )));
                }
                if !shift.is_finite() {
                    return Err(Error::InvalidParameter("bias shift must be finite".into()));
                }
            }
            BiasPrior::Zipf { alpha, c0 } => {
                if !(alpha >= &0.0) || !alpha.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "zipf exponent must be nonnegative, got {alpha}"
                    )));
                }
                if !(c0 > &0.0) || !c0.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "zipf scale must be positive, got {c0}"
                    )));
                }
            }
            BiasPrior::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::InvalidParameter("constant bias must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Raw r vector before normalization.
    pub fn sample_raw(&self, len: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Array1<f64>> {
        let out = match self {
            BiasPrior::ExpShift { rate, shift } => {
                let exp = Exp::new(*rate)
                    .map_err(|e| Error::InvalidParameter(format!("exp prior: {e}")))?;
                Array1::from_iter((0..len).map(|_| (shift + exp.sample(rng)).exp()))
            }
            BiasPrior::Zipf { alpha, c0 } => {
                let mut inv_sum = 0.0;
                for i in 1..=len {
                    inv_sum += (i as f64).powf(-alpha);
                }
                let cm = len as f64 / inv_sum;
                Array1::from_iter((1..=len).map(|i| c0 * cm * (i as f64).powf(-alpha)))
            }
            BiasPrior::Constant { value } => Array1::from_elem(len, value.exp()),
        };
        for (i, &r) in out.iter().enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "bias prior produced nonpositive or non-finite r at index {i}: {r}"
                )));
            }
        }
        Ok(out)
    }

    /// Expectation of raw r in the large-system limit, when it exists.
    pub fn limit_mean(&self) -> Option<f64> {
        match self {
            BiasPrior::ExpShift { rate, shift } => {
                if *rate > 1.0 {
                    Some(shift.exp() * rate / (rate - 1.0))
                } else {
                    None
                }
            }
            BiasPrior::Zipf { alpha, c0 } => {
                if *alpha < 1.0 {
                    Some(*c0)
                } else {
                    None
                }
            }
            BiasPrior::Constant { value } => Some(value.exp()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpec {
    pub embedding: EmbeddingPrior,
    pub bias_u: BiasPrior,
    pub bias_v: BiasPrior,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.bias_u.validate()?;
        self.bias_v.validate()
    }
}

/// Generative parameters (U, V, s_u, s_v, λ₀).
#[derive(Debug, Clone)]
pub struct GroundTruthModel {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub s_u: Array1<f64>,
    pub s_v: Array1<f64>,
    pub r_u: Array1<f64>,
    pub r_v: Array1<f64>,
    pub lambda0: f64,
    pub seed: Option<u64>,
}

impl GroundTruthModel {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u.nrows(), self.v.nrows(), self.u.ncols())
    }

    /// Build from raw factors and raw biases, applying the normalization:
    /// r_u is rescaled to empirical mean one, and the removed mass together
    /// with λ₀ is folded into r_v.
    pub fn from_raw(
        u: Array2<f64>,
        v: Array2<f64>,
        r_u_raw: Array1<f64>,
        r_v_raw: Array1<f64>,
        lambda0_raw: f64,
        seed: Option<u64>,
    ) -> Result<Self> {
        let m = u.nrows();
        let n = v.nrows();
        if r_u_raw.len() != m || r_v_raw.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "bias lengths ({}, {}) vs factor rows ({m}, {n})",
                r_u_raw.len(),
                r_v_raw.len()
            )));
        }
        if u.ncols() != v.ncols() {
            return Err(Error::DimensionMismatch("embedding dims differ".into()));
        }
        let c = r_u_raw.sum() / m as f64;
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("mean of raw r_u is {c}")));
        }
        let r_u = r_u_raw.mapv(|r| r / c);
        let r_v = r_v_raw.mapv(|r| r * c * lambda0_raw);
        for (i, &r) in r_u.iter().enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidParameter(format!("r_u[{i}] = {r}")));
            }
        }
        for (j, &r) in r_v.iter().enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidParameter(format!("r_v[{j}] = {r}")));
            }
        }
        let s_u = r_u.mapv(f64::ln);
        let s_v = r_v.mapv(f64::ln);
        Ok(GroundTruthModel {
            u,
            v,
            s_u,
            s_v,
            r_u,
            r_v,
            lambda0: 1.0,
            seed,
        })
    }

    /// Scaled factor A = diag(√r_u) U.
    pub fn a_scaled(&self) -> Array2<f64> {
        scale_rows(&self.u, &self.r_u.mapv(f64::sqrt))
    }

    /// Scaled factor B = diag(√r_v) V.
    pub fn b_scaled(&self) -> Array2<f64> {
        scale_rows(&self.v, &self.r_v.mapv(f64::sqrt))
    }
}

pub(crate) fn scale_rows(x: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, &wi) in out.outer_iter_mut().zip(w.iter()) {
        row.mapv_inplace(|v| v * wi);
    }
    out
}

pub fn generate_ground_truth(
    prior: &PriorSpec,
    m: usize,
    n: usize,
    d: usize,
    seed: u64,
) -> Result<GroundTruthModel> {
    prior.validate()?;
    if d < 1 || m < d || n < d {
        return Err(Error::InvalidParameter(format!(
            "need d >= 1, m >= d, n >= d; got m={m}, n={n}, d={d}"
        )));
    }
    let mut u = Array2::zeros((m, d));
    for (i, mut row) in u.outer_iter_mut().enumerate() {
        let mut rng = stream(seed, Domain::EmbeddingU, i as u64);
        let vals = prior.embedding.sample_row(d, &mut rng);
        for (x, v) in row.iter_mut().zip(vals) {
            *x = v;
        }
    }
    let mut v = Array2::zeros((n, d));
    for (j, mut row) in v.outer_iter_mut().enumerate() {
        let mut rng = stream(seed, Domain::EmbeddingV, j as u64);
        let vals = prior.embedding.sample_row(d, &mut rng);
        for (x, val) in row.iter_mut().zip(vals) {
            *x = val;
        }
    }
    let mut rng_u = stream(seed, Domain::BiasU, 0);
    let r_u_raw = prior.bias_u.sample_raw(m, &mut rng_u)?;
    let mut rng_v = stream(seed, Domain::BiasV, 0);
    let r_v_raw = prior.bias_v.sample_raw(n, &mut rng_v)?;
    GroundTruthModel::from_raw(u, v, r_u_raw, r_v_raw, 1.0, Some(seed))
}

/// Pair rate λ_ij = λ₀ exp(u_iᵀv_j/√m + s_i + s_j).
pub fn poisson_lambda(model: &GroundTruthModel, i: usize, j: usize) -> Result<f64> {
    let (m, n, _) = model.dims();
    if i >= m || j >= n {
        return Err(Error::DimensionMismatch(format!(
            "index ({i}, {j}) out of range for {m}×{n}"
        )));
    }
    let mut dot = 0.0;
    for l in 0..model.u.ncols() {
        dot += model.u[(i, l)] * model.v[(j, l)];
    }
    let exponent = dot / (m as f64).sqrt() + model.s_u[i] + model.s_v[j];
    if exponent > MAX_LOG_RATE {
        return Err(Error::ChannelOverflow { i, j, exponent });
    }
    Ok(model.lambda0 * exponent.exp())
}

/// Sparse matrix of pair counts in CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    m: usize,
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<u64>,
}

impl CountMatrix {
    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn from_rows(m: usize, n: usize, rows: Vec<(Vec<u32>, Vec<u64>)>) -> Result<Self> {
        if rows.len() != m || n > u32::MAX as usize {
            return Err(Error::DimensionMismatch(format!(
                "row count {} vs m={m}",
                rows.len()
            )));
        }
        let nnz: usize = rows.iter().map(|(c, _)| c.len()).sum();
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut col = Vec::with_capacity(nnz);
        let mut val = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for (cols, vals) in rows {
            debug_assert_eq!(cols.len(), vals.len());
            col.extend_from_slice(&cols);
            val.extend_from_slice(&vals);
            row_ptr.push(col.len());
        }
        Ok(CountMatrix { m, n, row_ptr, col, val })
    }

    /// Build from unsorted triplets; duplicate coordinates are summed.
    pub fn from_triplets(m: usize, n: usize, mut t: Vec<(u32, u32, u64)>) -> Result<Self> {
        if m > u32::MAX as usize || n > u32::MAX as usize {
            return Err(Error::InvalidParameter("dims exceed u32 index range".into()));
        }
        for &(i, j, _) in &t {
            if i as usize >= m || j as usize >= n {
                return Err(Error::DimensionMismatch(format!(
                    "entry ({i}, {j}) outside {m}×{n}"
                )));
            }
        }
        t.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut rows: Vec<(Vec<u32>, Vec<u64>)> = vec![(Vec::new(), Vec::new()); m];
        let mut prev: Option<(u32, u32)> = None;
        for (i, j, z) in t {
            if z == 0 {
                continue;
            }
            let row = &mut rows[i as usize];
            if prev == Some((i, j)) {
                let last = row.1.last_mut().expect("merge target");
                *last = last
                    .checked_add(z)
                    .ok_or_else(|| Error::InvalidParameter("count overflow merging duplicates".into()))?;
            } else {
                row.0.push(j);
                row.1.push(z);
            }
            prev = Some((i, j));
        }
        Self::from_rows(m, n, rows)
    }

    pub fn row(&self, i: usize) -> (&[u32], &[u64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col[lo..hi], &self.val[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => vals[p],
            Err(_) => 0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.m).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals.iter()).map(move |(&j, &z)| (i, j as usize, z))
        })
    }

    /// Total count, exact integer accumulation.
    pub fn z_tot(&self) -> Result<u64> {
        let mut acc: u128 = 0;
        for &z in &self.val {
            acc += z as u128;
        }
        u64::try_from(acc).map_err(|_| Error::InvalidParameter("Z_tot exceeds u64".into()))
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.m)
            .map(|i| self.row(i).1.iter().sum::<u64>())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.n];
        for (_, j, z) in self.iter() {
            out[j] += z;
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.m, self.n));
        for (i, j, z) in self.iter() {
            out[(i, j)] = z as f64;
        }
        out
    }
}

/// Draw Z_ij ~ Poisson(λ_ij) independently; zeros are not stored.
/// Rows use counter-based substreams, so row-parallel sampling is bitwise
/// identical to the serial order.
pub fn sample_counts(model: &GroundTruthModel, seed: u64) -> Result<CountMatrix> {
    let (m, n, d) = model.dims();
    if n > u32::MAX as usize {
        return Err(Error::InvalidParameter("n exceeds u32 index range".into()));
    }
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let rows: Vec<Result<(Vec<u32>, Vec<u64>)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Domain::Counts, i as u64);
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            let ui = model.u.row(i);
            let si = model.s_u[i];
            for j in 0..n {
                let vj = model.v.row(j);
                let mut dot = 0.0;
                for l in 0..d {
                    dot += ui[l] * vj[l];
                }
                let exponent = dot * inv_sqrt_m + si + model.s_v[j];
                if exponent > MAX_LOG_RATE {
                    return Err(Error::ChannelOverflow { i, j, exponent });
                }
                let lambda = model.lambda0 * exponent.exp();
                if lambda == 0.0 {
                    continue;
                }
                let z = sample_poisson(&mut rng, lambda);
                if z > 0 {
                    cols.push(j as u32);
                    vals.push(z);
                }
            }
            Ok((cols, vals))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    CountMatrix::from_rows(m, n, rows)
}

/// Gaussian-surrogate observation Ỹ = (1/√m) A Bᵀ + W, W_ij iid N(0,1),
/// built with the true biases.
pub fn sample_gaussian_surrogate(model: &GroundTruthModel, seed: u64) -> Result<ScaledObservation> {
    let (m, n, d) = model.dims();
    let a = model.a_scaled();
    let b = model.b_scaled();
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let mut y = Array2::zeros((m, n));
    y.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = stream(seed, Domain::Noise, i as u64);
            let ai = a.row(i);
            for (j, out) in row.iter_mut().enumerate() {
                let bj = b.row(j);
                let mut dot = 0.0;
                for l in 0..d {
                    dot += ai[l] * bj[l];
                }
                let w: f64 = StandardNormal.sample(&mut rng);
                *out = dot * inv_sqrt_m + w;
            }
        });
    ScaledObservation::from_dense_true_bias(y, &model.r_u, &model.r_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_prior() -> PriorSpec {
        PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.0 },
            bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 0.0 },
            bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 0.0 },
        }
    }

    #[test]
    fn normalization_invariant_holds() {
        let model = generate_ground_truth(&small_prior(), 40, 60, 3, 1).unwrap();
        let mean = model.r_u.sum() / 40.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert_eq!(model.lambda0, 1.0);
        assert!(model.r_v.iter().all(|&r| r > 0.0 && r.is_finite()));
    }

    #[test]
    fn generation_reproducible() {
        let a = generate_ground_truth(&small_prior(), 20, 30, 4, 9).unwrap();
        let b = generate_ground_truth(&small_prior(), 20, 30, 4, 9).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.s_v, b.s_v);
    }

    #[test]
    fn full_sparsity_zeroes_everything() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 1.0, rho: 1.0 },
            ..small_prior()
        };
        let model = generate_ground_truth(&prior, 10, 12, 5, 3).unwrap();
        assert!(model.u.iter().all(|&x| x == 0.0));
        assert!(model.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_sparsity_zeroes_half_per_row() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.5 },
            ..small_prior()
        };
        let model = generate_ground_truth(&prior, 30, 30, 10, 3).unwrap();
        for row in model.u.outer_iter() {
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 5);
        }
    }

    #[test]
    fn zipf_realization_hand_values() {
        // m = 4, α = 1: C_m = 4/(1 + 1/2 + 1/3 + 1/4) = 48/25.
        let prior = BiasPrior::Zipf { alpha: 1.0, c0: 1.0 };
        let mut rng = stream(0, Domain::BiasU, 0);
        let r = prior.sample_raw(4, &mut rng).unwrap();
        let expect = [1.92, 0.96, 0.64, 0.48];
        for (a, e) in r.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // Ratio law r_1 / r_ℓ = ℓ^α before normalization.
        for l in 1..=4usize {
            assert!((r[0] / r[l - 1] - l as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_hand_values() {
        let m = 4;
        let mut u = Array2::zeros((m, 1));
        u[(0, 0)] = (m as f64).sqrt() * 2f64.ln();
        let mut v = Array2::zeros((5, 1));
        v[(0, 0)] = 1.0;
        let r_u = Array1::ones(m);
        let r_v = Array1::ones(5);
        let mut model =
            GroundTruthModel::from_raw(u, v, r_u, r_v, 1.0, None).unwrap();
        model.s_u[0] = 3f64.ln();
        // λ = exp(log 2 + log 3) = 6
        let lam = poisson_lambda(&model, 0, 0).unwrap();
        assert!((lam - 6.0).abs() < 1e-12);
        // zero correlation, zero biases → 1
        let lam0 = poisson_lambda(&model, 1, 1).unwrap();
        assert!((lam0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_overflow_guarded() {
        let mut u = Array2::zeros((4, 1));
        u[(0, 0)] = 2000.0;
        let mut v = Array2::zeros((4, 1));
        v[(0, 0)] = 2000.0;
        let model = GroundTruthModel {
            u,
            v,
            s_u: Array1::zeros(4),
            s_v: Array1::zeros(4),
            r_u: Array1::ones(4),
            r_v: Array1::ones(4),
            lambda0: 1.0,
            seed: None,
        };
        match poisson_lambda(&model, 0, 0) {
            Err(Error::ChannelOverflow { i: 0, j: 0, .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn zero_rate_limit_gives_empty_matrix() {
        let model = GroundTruthModel {
            u: Array2::zeros((6, 2)),
            v: Array2::zeros((8, 2)),
            s_u: Array1::zeros(6),
            s_v: Array1::zeros(8),
            r_u: Array1::ones(6),
            r_v: Array1::ones(8),
            lambda0: 0.0,
            seed: None,
        };
        let z = sample_counts(&model, 5).unwrap();
        assert_eq!(z.nnz(), 0);
        assert_eq!(z.z_tot().unwrap(), 0);
    }

    #[test]
    fn counts_reproducible_and_mean_matches_budget() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.0 },
            bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 1.0 },
            bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 1.0 },
        };
        let model = generate_ground_truth(&prior, 150, 200, 5, 11).unwrap();
        let z1 = sample_counts(&model, 21).unwrap();
        let z2 = sample_counts(&model, 21).unwrap();
        assert_eq!(z1, z2);
        // Sample budget: mean(Z) ≈ λ₀ · mean(r_u) · mean(r_v).
        let (m, n) = z1.dims();
        let mean_z = z1.z_tot().unwrap() as f64 / (m * n) as f64;
        let budget = (model.r_u.sum() / m as f64) * (model.r_v.sum() / n as f64);
        assert!(
            (mean_z - budget).abs() / budget < 0.05,
            "mean {mean_z} vs budget {budget}"
        );
    }

    #[test]
    fn count_matrix_round_trip_accessors() {
        let t = vec![(0u32, 1u32, 3u64), (2, 0, 5), (0, 1, 2)];
        let z = CountMatrix::from_triplets(3, 2, t).unwrap();
        assert_eq!(z.get(0, 1), 5); // duplicates summed
        assert_eq!(z.get(2, 0), 5);
        assert_eq!(z.get(1, 1), 0);
        assert_eq!(z.z_tot().unwrap(), 10);
        assert_eq!(z.row_sums(), vec![5, 0, 5]);
        assert_eq!(z.col_sums(), vec![5, 5]);
    }
}
