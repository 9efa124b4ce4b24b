//! Row-wise denoisers and their input Jacobians.
//!
//! Both denoisers solve min_a ½ aᵀF a − pᵀa + g(a/√r) for one row. F is
//! symmetrized and its eigenvalues floored at 1e-10 before use; the iteration
//! can lose definiteness to Monte-Carlo noise.
//!
//! Squared-norm: a = p (F + (λ/r) I)⁻¹ in closed form; the Jacobian is that
//! inverse. L1: cyclic coordinate descent on the quadratic form directly (no
//! explicit square root of F is needed; the formulation is algebraically the
//! same as the LASSO form), warm-startable; the Jacobian is the inverse of F
//! restricted to the active set, embedded in d×d zeros.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};

/// Absolute eigenvalue floor applied to F.
pub const EPS_PD: f64 = 1e-10;
/// Relative eigenvalue floor, as a fraction of λ_max(F). The iteration's
/// F = Q − Γ passes through exact cancellation when started uninformatively;
/// without a relative floor the row problems there have essentially flat
/// directions with unbounded-scale minimizers that no solver can reach.
pub const EPS_PD_REL: f64 = 1e-3;
/// Coordinate-descent stop: max coordinate change per sweep.
pub const CD_TOL: f64 = 1e-10;
pub const CD_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    SquaredNorm,
    L1,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    pub lambda_u: f64,
    pub lambda_v: f64,
}

impl DenoiserSpec {
    pub fn l2(lambda_u: f64, lambda_v: f64) -> Self {
        DenoiserSpec { kind: DenoiserKind::SquaredNorm, lambda_u, lambda_v }
    }

    pub fn l1(lambda_u: f64, lambda_v: f64) -> Self {
        DenoiserSpec { kind: DenoiserKind::L1, lambda_u, lambda_v }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u > 0.0) || !(self.lambda_v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "regularization weights must be positive, got ({}, {})",
                self.lambda_u, self.lambda_v
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub a_hat: Array1<f64>,
    /// ∂G/∂p at the input, d×d.
    pub jacobian: Array2<f64>,
}

/// Symmetrize F and floor its eigenvalues at max(EPS_PD, EPS_PD_REL·λ_max).
fn f_eigen(f: &ArrayView2<f64>) -> SymEigen {
    let mut eig = linalg::sym_eigen(f);
    let lmax = eig.values[0];
    let floor = if lmax > 0.0 { (EPS_PD_REL * lmax).max(EPS_PD) } else { EPS_PD };
    eig.values.mapv_inplace(|l| l.max(floor));
    eig
}

/// Floored F materialized back as a matrix (used by the L1 path).
fn f_floored(eig: &SymEigen) -> Array2<f64> {
    let d = eig.values.len();
    let mut out = Array2::zeros((d, d));
    for k in 0..d {
        let lk = eig.values[k];
        for i in 0..d {
            let vik = eig.vectors[(i, k)];
            for j in 0..d {
                out[(i, j)] += lk * vik * eig.vectors[(j, k)];
            }
        }
    }
    out
}

fn check_row_inputs(p: &ArrayView1<f64>, r: f64, lambda: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("row weight r = {r}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda}")));
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("non-finite denoiser input".into()));
    }
    Ok(())
}

/// a = p (F + (λ/r) I)⁻¹ through the shared eigenbasis of F.
fn l2_row(p: &ArrayView1<f64>, c: f64, eig: &SymEigen) -> (Array1<f64>, Array2<f64>) {
    let d = p.len();
    let mut t = Array1::zeros(d);
    for k in 0..d {
        let mut acc = 0.0;
        for i in 0..d {
            acc += p[i] * eig.vectors[(i, k)];
        }
        t[k] = acc / (eig.values[k] + c);
    }
    let mut a = Array1::zeros(d);
    for i in 0..d {
        let mut acc = 0.0;
        for k in 0..d {
            acc += eig.vectors[(i, k)] * t[k];
        }
        a[i] = acc;
    }
    let mut jac = Array2::zeros((d, d));
    for k in 0..d {
        let w = 1.0 / (eig.values[k] + c);
        for i in 0..d {
            let vik = eig.vectors[(i, k)];
            for j in 0..d {
                jac[(i, j)] += w * vik * eig.vectors[(j, k)];
            }
        }
    }
    (a, jac)
}

pub fn denoise_l2(
    p: &ArrayView1<f64>,
    r: f64,
    f: &ArrayView2<f64>,
    lambda: f64,
) -> Result<DenoiseResult> {
    check_row_inputs(p, r, lambda)?;
    let eig = f_eigen(f);
    let c = lambda / r;
    if eig.values.iter().any(|&l| !(l + c > 0.0) || !(l + c).is_finite()) {
        return Err(Error::Conditioning(format!(
            "F + (lambda/r) I not positive definite (lambda/r = {c})"
        )));
    }
    let (a_hat, jacobian) = l2_row(p, c, &eig);
    Ok(DenoiseResult { a_hat, jacobian })
}

/// What to do when coordinate descent hits the sweep cap: report failure, or
/// return the capped iterate the way warm-started lasso libraries do. The
/// iteration uses the capped form so that a transient with a near-singular
/// quadratic term (the first step from an uninformative start produces one)
/// passes through instead of aborting; both the simulation and the
/// state-evolution recursion then apply the identical row map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapPolicy {
    Error,
    ReturnPartial,
}

/// Cyclic coordinate descent for min ½ aᵀF a − pᵀa + μ‖a‖₁.
fn l1_cd(
    p: &ArrayView1<f64>,
    mu: f64,
    f: &Array2<f64>,
    warm: Option<&[f64]>,
    cap: CapPolicy,
) -> Result<Array1<f64>> {
    let d = p.len();
    let mut a: Vec<f64> = match warm {
        Some(w) => w.to_vec(),
        None => vec![0.0; d],
    };
    for sweep in 0..CD_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        let mut max_abs = 0.0f64;
        for k in 0..d {
            let fkk = f[(k, k)];
            let mut cross = 0.0;
            for l in 0..d {
                if l != k {
                    cross += f[(k, l)] * a[l];
                }
            }
            let z = p[k] - cross;
            let new = if z.abs() <= mu { 0.0 } else { (z - mu.copysign(z)) / fkk };
            let ch = (new - a[k]).abs();
            if ch > max_change {
                max_change = ch;
            }
            a[k] = new;
            if new.abs() > max_abs {
                max_abs = new.abs();
            }
        }
        // Stop relative to the iterate scale; an absolute 1e-10 cannot be
        // represented once coordinates grow past ~1e6.
        if max_change < CD_TOL * (1.0 + max_abs) {
            return Ok(Array1::from_vec(a));
        }
        if sweep == CD_MAX_SWEEPS - 1 {
            return match cap {
                CapPolicy::Error => Err(Error::NonConvergence {
                    iterations: CD_MAX_SWEEPS,
                    residual: max_change,
                }),
                CapPolicy::ReturnPartial => Ok(Array1::from_vec(a)),
            };
        }
    }
    unreachable!()
}

/// Jacobian of the L1 denoiser: (F restricted to the active set)⁻¹ embedded in
/// d×d zeros. Coordinates exactly at the threshold count as inactive.
fn l1_jacobian(a: &Array1<f64>, f: &Array2<f64>) -> Result<Array2<f64>> {
    let d = a.len();
    let active: Vec<usize> = (0..d).filter(|&k| a[k] != 0.0).collect();
    let mut jac = Array2::zeros((d, d));
    if active.is_empty() {
        return Ok(jac);
    }
    let s = active.len();
    let mut fs = Array2::zeros((s, s));
    for (ai, &i) in active.iter().enumerate() {
        for (aj, &j) in active.iter().enumerate() {
            fs[(ai, aj)] = f[(i, j)];
        }
    }
    let inv = linalg::inv_small(&fs.view())?;
    for (ai, &i) in active.iter().enumerate() {
        for (aj, &j) in active.iter().enumerate() {
            jac[(i, j)] = inv[(ai, aj)];
        }
    }
    Ok(jac)
}

fn l1_row(
    p: &ArrayView1<f64>,
    mu: f64,
    f: &Array2<f64>,
    warm: Option<&[f64]>,
    cap: CapPolicy,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let a = l1_cd(p, mu, f, warm, cap)?;
    let jac = l1_jacobian(&a, f)?;
    Ok((a, jac))
}

pub fn denoise_l1(
    p: &ArrayView1<f64>,
    r: f64,
    f: &ArrayView2<f64>,
    lambda: f64,
) -> Result<DenoiseResult> {
    check_row_inputs(p, r, lambda)?;
    let eig = f_eigen(f);
    let ftilde = f_floored(&eig);
    let mu = lambda / r.sqrt();
    let (a_hat, jacobian) = l1_row(p, mu, &ftilde, None, CapPolicy::Error)?;
    Ok(DenoiseResult { a_hat, jacobian })
}

/// Mean of the listed Jacobians scaled by (list length / normalizer).
pub fn average_jacobian(results: &[DenoiseResult], normalizer: usize) -> Result<Array2<f64>> {
    let first = results
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty Jacobian list".into()))?;
    let d = first.jacobian.nrows();
    let mut acc = Array2::zeros((d, d));
    for r in results {
        acc += &r.jacobian;
    }
    Ok(acc / normalizer as f64)
}

/// One denoising pass over all rows of `p`:
/// returns the denoised rows and the ordered sum of per-row Jacobians.
///
/// The factorization of F is computed once and shared; per-row arithmetic is
/// identical to the single-row entry points, so a loop of `denoise_l2` calls
/// reproduces this path bitwise.
pub(crate) fn denoise_rows(
    kind: DenoiserKind,
    p: &ArrayView2<f64>,
    r: &Array1<f64>,
    f: &ArrayView2<f64>,
    lambda: f64,
    warm: Option<&ArrayView2<f64>>,
    cap: CapPolicy,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (rows, d) = p.dim();
    if r.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {rows} rows",
            r.len()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda}")));
    }
    for (i, &ri) in r.iter().enumerate() {
        if !(ri > 0.0) || !ri.is_finite() {
            return Err(Error::InvalidParameter(format!("row weight r[{i}] = {ri}")));
        }
    }
    let eig = f_eigen(f);
    let per_row: Vec<Result<(Array1<f64>, Array2<f64>)>> = match kind {
        DenoiserKind::SquaredNorm => (0..rows)
            .into_par_iter()
            .map(|i| Ok(l2_row(&p.row(i), lambda / r[i], &eig)))
            .collect(),
        DenoiserKind::L1 => {
            let ftilde = f_floored(&eig);
            (0..rows)
                .into_par_iter()
                .map(|i| {
                    let ws: Option<&[f64]> =
                        warm.map(|w| w.row(i).to_slice().expect("contiguous warm row"));
                    l1_row(&p.row(i), lambda / r[i].sqrt(), &ftilde, ws, cap)
                })
                .collect()
        }
    };
    let mut a = Array2::zeros((rows, d));
    let mut jac_sum = Array2::zeros((d, d));
    for (i, item) in per_row.into_iter().enumerate() {
        let (row, jac) = item?;
        a.row_mut(i).assign(&row);
        jac_sum += &jac;
    }
    Ok((a, jac_sum))
}

/// Value of the row regularizer g(a/√r): (λ/2)‖a‖²/r or λ‖a‖₁/√r.
pub fn row_regularizer(kind: DenoiserKind, a: &ArrayView1<f64>, r: f64, lambda: f64) -> f64 {
    match kind {
        DenoiserKind::SquaredNorm => {
            0.5 * lambda * a.iter().map(|x| x * x).sum::<f64>() / r
        }
        DenoiserKind::L1 => lambda * a.iter().map(|x| x.abs()).sum::<f64>() / r.sqrt(),
    }
}
