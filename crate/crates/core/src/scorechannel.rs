//! Scaled Fisher-score observation Ỹ and spectral diagnostics.
//!
//! Ỹ_ij = (Z_ij − r̂_i r̂_j)/√(r̂_i r̂_j). The score shifts every zero count to
//! −√(r̂_i r̂_j), so Ỹ is dense even when Z is sparse. Within the dense cap the
//! matrix is materialized; above it products use the sparse-plus-rank-one
//! structure Ỹ = D_u Z D_v − √r̂_u √r̂_vᵀ directly.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::bias::BiasEstimate;
use crate::error::{Error, Result};
use crate::linalg::{self, MatOps};
use crate::model::{generate_ground_truth, sample_counts, BiasPrior, EmbeddingPrior, PriorSpec};
#[cfg(test)]
use crate::rng::Domain;

/// Largest m·n materialized densely (4000 × 6000 doubles ≈ 190 MB).
pub const DENSE_CAP: usize = 24_000_000;

/// Fixed row-chunk size for deterministic reductions over rows.
const CHUNK: usize = 512;

#[derive(Debug, Clone)]
enum Repr {
    Dense(Array2<f64>),
    Implicit {
        row_ptr: Vec<usize>,
        col: Vec<u32>,
        val: Vec<f64>,
        sqrt_ru: Array1<f64>,
        sqrt_rv: Array1<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ScaledObservation {
    repr: Repr,
    bias: BiasEstimate,
    m: usize,
    n: usize,
}

impl ScaledObservation {
    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn bias(&self) -> &BiasEstimate {
        &self.bias
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, Repr::Dense(_))
    }

    /// Inverse Fisher information Δ_ij = 1/(rate_u(i)·rate_v(j)).
    pub fn delta(&self, i: usize, j: usize) -> f64 {
        1.0 / (self.bias.r_u[i] * self.bias.r_v[j] * self.bias.budget)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.repr {
            Repr::Dense(y) => y[(i, j)],
            Repr::Implicit { row_ptr, col, val, sqrt_ru, sqrt_rv } => {
                let range = row_ptr[i]..row_ptr[i + 1];
                let z = match col[range.clone()].binary_search(&(j as u32)) {
                    Ok(p) => val[range.start + p],
                    Err(_) => 0.0,
                };
                let s = sqrt_ru[i] * sqrt_rv[j];
                z / s - s
            }
        }
    }

    pub fn dense(&self) -> Option<&Array2<f64>> {
        match &self.repr {
            Repr::Dense(y) => Some(y),
            Repr::Implicit { .. } => None,
        }
    }

    pub fn frob_sq(&self) -> f64 {
        match &self.repr {
            Repr::Dense(y) => y.iter().map(|x| x * x).sum(),
            Repr::Implicit { row_ptr, col, val, sqrt_ru, sqrt_rv } => {
                // Σ Ỹ² = Σ_nz (z²/(r_i r_j) − 2z) + Σ r_i · Σ r_j
                let mut acc = 0.0;
                for i in 0..self.m {
                    let ri = sqrt_ru[i] * sqrt_ru[i];
                    for p in row_ptr[i]..row_ptr[i + 1] {
                        let rj = sqrt_rv[col[p] as usize];
                        let z = val[p];
                        acc += z * z / (ri * rj * rj) - 2.0 * z;
                    }
                }
                let su: f64 = sqrt_ru.iter().map(|x| x * x).sum();
                let sv: f64 = sqrt_rv.iter().map(|x| x * x).sum();
                acc + su * sv
            }
        }
    }

    pub(crate) fn from_dense_true_bias(
        y: Array2<f64>,
        r_u: &Array1<f64>,
        r_v: &Array1<f64>,
    ) -> Result<Self> {
        let (m, n) = y.dim();
        let bias = BiasEstimate::from_vectors(r_u.clone(), r_v.clone())?;
        Ok(ScaledObservation { repr: Repr::Dense(y), bias, m, n })
    }

    #[cfg(test)]
    pub(crate) fn from_parts_for_tests(y: Array2<f64>, bias: BiasEstimate) -> Self {
        let (m, n) = y.dim();
        ScaledObservation { repr: Repr::Dense(y), bias, m, n }
    }
}

fn check_bias(bias: &BiasEstimate, m: usize, n: usize) -> Result<()> {
    if bias.dims() != (m, n) {
        return Err(Error::DimensionMismatch(format!(
            "bias dims {:?} vs counts ({m}, {n})",
            bias.dims()
        )));
    }
    if !(bias.budget > 0.0) || !bias.budget.is_finite() {
        return Err(Error::InvalidParameter(format!("budget = {}", bias.budget)));
    }
    for (i, &r) in bias.r_u.iter().enumerate() {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidParameter(format!("r_u[{i}] = {r}")));
        }
    }
    for (j, &r) in bias.r_v.iter().enumerate() {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidParameter(format!("r_v[{j}] = {r}")));
        }
    }
    Ok(())
}

/// Build Ỹ from counts and bias estimates. Chooses the dense representation
/// when m·n fits the cap, the implicit product form otherwise.
pub fn build_scaled_observation(
    z: &crate::model::CountMatrix,
    bias: &BiasEstimate,
) -> Result<ScaledObservation> {
    let (m, n) = z.dims();
    if m * n <= DENSE_CAP {
        build_dense(z, bias)
    } else {
        build_implicit(z, bias)
    }
}

pub fn build_dense(
    z: &crate::model::CountMatrix,
    bias: &BiasEstimate,
) -> Result<ScaledObservation> {
    let (m, n) = z.dims();
    if m * n > DENSE_CAP {
        return Err(Error::InvalidParameter(format!(
            "dense observation of {m}×{n} exceeds the {DENSE_CAP}-entry cap"
        )));
    }
    check_bias(bias, m, n)?;
    let sqrt_ru = bias.r_u.mapv(f64::sqrt);
    let sqrt_rv = bias.effective_r_v().mapv(f64::sqrt);
    let mut y = Array2::zeros((m, n));
    let sv = &sqrt_rv;
    y.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let si = sqrt_ru[i];
            for (j, out) in row.iter_mut().enumerate() {
                *out = -si * sv[j];
            }
            let (cols, vals) = z.row(i);
            for (&j, &zv) in cols.iter().zip(vals.iter()) {
                let s = si * sv[j as usize];
                row[j as usize] = zv as f64 / s - s;
            }
        });
    Ok(ScaledObservation {
        repr: Repr::Dense(y),
        bias: bias.clone(),
        m,
        n,
    })
}

pub fn build_implicit(
    z: &crate::model::CountMatrix,
    bias: &BiasEstimate,
) -> Result<ScaledObservation> {
    let (m, n) = z.dims();
    check_bias(bias, m, n)?;
    let mut row_ptr = Vec::with_capacity(m + 1);
    let mut col = Vec::with_capacity(z.nnz());
    let mut val = Vec::with_capacity(z.nnz());
    row_ptr.push(0usize);
    for i in 0..m {
        let (cols, vals) = z.row(i);
        col.extend_from_slice(cols);
        val.extend(vals.iter().map(|&x| x as f64));
        row_ptr.push(col.len());
    }
    Ok(ScaledObservation {
        repr: Repr::Implicit {
            row_ptr,
            col,
            val,
            sqrt_ru: bias.r_u.mapv(f64::sqrt),
            sqrt_rv: bias.effective_r_v().mapv(f64::sqrt),
        },
        bias: bias.clone(),
        m,
        n,
    })
}

impl MatOps for ScaledObservation {
    fn nrows(&self) -> usize {
        self.m
    }
    fn ncols(&self) -> usize {
        self.n
    }

    /// Ỹ · x for x: n×b.
    fn right_mul(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        match &self.repr {
            Repr::Dense(y) => linalg::matmul(&y.view(), x),
            Repr::Implicit { row_ptr, col, val, sqrt_ru, sqrt_rv } => {
                let b = x.ncols();
                // t = Σ_j √r_v[j] x_j  (rank-one part)
                let mut t = vec![0.0f64; b];
                for j in 0..self.n {
                    let w = sqrt_rv[j];
                    for l in 0..b {
                        t[l] += w * x[(j, l)];
                    }
                }
                let mut out = Array2::zeros((self.m, b));
                out.as_slice_mut()
                    .expect("contiguous")
                    .par_chunks_mut(b)
                    .enumerate()
                    .for_each(|(i, orow)| {
                        for p in row_ptr[i]..row_ptr[i + 1] {
                            let j = col[p] as usize;
                            let zs = val[p] / sqrt_rv[j];
                            for l in 0..b {
                                orow[l] += zs * x[(j, l)];
                            }
                        }
                        let inv = 1.0 / sqrt_ru[i];
                        for l in 0..b {
                            orow[l] = orow[l] * inv - sqrt_ru[i] * t[l];
                        }
                    });
                out
            }
        }
    }

    /// Ỹᵀ · x for x: m×b.
    fn left_tmul(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        match &self.repr {
            Repr::Dense(y) => linalg::matmul_tn(&y.view(), x),
            Repr::Implicit { row_ptr, col, val, sqrt_ru, sqrt_rv } => {
                let b = x.ncols();
                let mut t = vec![0.0f64; b];
                for i in 0..self.m {
                    let w = sqrt_ru[i];
                    for l in 0..b {
                        t[l] += w * x[(i, l)];
                    }
                }
                // Scatter over fixed row chunks, combined in chunk order.
                let starts: Vec<usize> = (0..self.m).step_by(CHUNK).collect();
                let partials: Vec<Array2<f64>> = starts
                    .par_iter()
                    .map(|&i0| {
                        let i1 = (i0 + CHUNK).min(self.m);
                        let mut p = Array2::zeros((self.n, b));
                        for i in i0..i1 {
                            let xi_scaled: Vec<f64> =
                                (0..b).map(|l| x[(i, l)] / sqrt_ru[i]).collect();
                            for pos in row_ptr[i]..row_ptr[i + 1] {
                                let j = col[pos] as usize;
                                let z = val[pos];
                                for l in 0..b {
                                    p[(j, l)] += z * xi_scaled[l];
                                }
                            }
                        }
                        p
                    })
                    .collect();
                let mut out = Array2::zeros((self.n, b));
                for p in partials {
                    out += &p;
                }
                for j in 0..self.n {
                    let inv = 1.0 / sqrt_rv[j];
                    for l in 0..b {
                        out[(j, l)] = out[(j, l)] * inv - sqrt_rv[j] * t[l];
                    }
                }
                out
            }
        }
    }
}

/// Spectral threshold λ_max(Σᵘ Σᵛ)/(1+√β)², β = m/n.
pub fn delta_critical(
    sigma_u: &ArrayView2<f64>,
    sigma_v: &ArrayView2<f64>,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    for (name, s) in [("sigma_u", sigma_u), ("sigma_v", sigma_v)] {
        if s.nrows() != s.ncols() {
            return Err(Error::DimensionMismatch(format!("{name} is not square")));
        }
        let scale = s.iter().map(|x| x.abs()).fold(1e-300, f64::max);
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
                }
            }
        }
        let eig = linalg::sym_eigen(s);
        if eig.values.iter().any(|&l| l < -1e-10 * scale) {
            return Err(Error::InvalidParameter(format!("{name} is not PSD")));
        }
    }
    if sigma_u.nrows() != sigma_v.nrows() {
        return Err(Error::DimensionMismatch("covariance dims differ".into()));
    }
    // λ_max(Σu Σv) through the symmetric form Σu^{1/2} Σv Σu^{1/2}.
    let su_half = linalg::sym_sqrt_psd(sigma_u);
    let tmp = linalg::matmul(&su_half.view(), sigma_v);
    let sym = linalg::matmul(&tmp.view(), &su_half.view());
    let eig = linalg::sym_eigen(&sym.view());
    let lmax = eig.values[0].max(0.0);
    Ok(lmax / (1.0 + beta.sqrt()).powi(2))
}

/// Leading singular values of Ỹ/√m at one sweep point.
///
/// Values are σ(Ỹ)/√m; for an m×n noise matrix with unit-variance entries the
/// Marchenko–Pastur bulk edge under this normalization is 1 + √(n/m), which is
/// what `bulk_edge` records.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    pub u_level: f64,
    pub v_level: f64,
    pub delta: f64,
    /// σ_1 .. σ_{d+1} of Ỹ/√m, descending.
    pub sigmas: Vec<f64>,
    pub bulk_edge: f64,
}

impl SpectralReport {
    pub fn sigma1(&self) -> f64 {
        self.sigmas[0]
    }
    pub fn sigma_d(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 2]
    }
    pub fn sigma_d1(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct SweepTemplate {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub sigma2: f64,
    pub rho: f64,
    pub seed: u64,
    /// Zero the embeddings entirely (pure-noise reference).
    pub zero_signal: bool,
}

/// Constant-bias singular-value sweep: for each (u, v) level pair, draw a
/// model with s_i^u = u, s_j^v = v, sample counts, build Ỹ, and record the
/// top d+1 singular values of Ỹ/√m together with Δ = e^{−(u+v)}.
pub fn singular_sweep(
    template: &SweepTemplate,
    grid: &[(f64, f64)],
    d: usize,
) -> Result<Vec<SpectralReport>> {
    let mut out = Vec::with_capacity(grid.len());
    for (gi, &(u_level, v_level)) in grid.iter().enumerate() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior {
                sigma2: template.sigma2,
                rho: template.rho,
            },
            bias_u: BiasPrior::Constant { value: u_level },
            bias_v: BiasPrior::Constant { value: v_level },
        };
        let point_seed = template
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(gi as u64);
        let mut model = generate_ground_truth(&prior, template.m, template.n, template.d, point_seed)?;
        if template.zero_signal {
            model.u.fill(0.0);
            model.v.fill(0.0);
        }
        let z = sample_counts(&model, point_seed ^ 0x5eed)?;
        let bias = crate::bias::estimate_bias(&z)?;
        let obs = build_scaled_observation(&z, &bias)?;
        out.push(spectral_report(&obs, d, u_level, v_level, point_seed)?);
    }
    Ok(out)
}

/// Top d+1 singular values of Ỹ/√m for an existing observation.
pub fn spectral_report(
    obs: &ScaledObservation,
    d: usize,
    u_level: f64,
    v_level: f64,
    seed: u64,
) -> Result<SpectralReport> {
    let (m, n) = obs.dims();
    let svd = linalg::top_singular_triplets(obs, d + 1, 1e-8, 1000, seed)?;
    let inv = 1.0 / (m as f64).sqrt();
    let sigmas: Vec<f64> = svd.s.iter().map(|s| s * inv).collect();
    Ok(SpectralReport {
        u_level,
        v_level,
        delta: (-(u_level + v_level)).exp(),
        sigmas,
        bulk_edge: 1.0 + (n as f64 / m as f64).sqrt(),
    })
}
