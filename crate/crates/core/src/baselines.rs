//! Reference estimators: truncated spectral factorization of Ỹ and plain
//! full-batch gradient descent on the quadratic loss.

use ndarray::Array2;
use std::time::Instant;

use crate::bias::BiasEstimate;
use crate::denoise::{DenoiserKind, DenoiserSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, MatOps};
use crate::metrics::quadratic_loss;
use crate::rng::{self, Domain};
use crate::scorechannel::ScaledObservation;

/// Internal seed for the subspace iteration start; the estimate itself is a
/// deterministic function of the observation.
const SPECTRAL_SEED: u64 = 0x5350_4543;

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub a_hat: Array2<f64>,
    pub b_hat: Array2<f64>,
    pub iterations: usize,
    pub final_loss: f64,
    /// First-order residual at the returned point.
    pub stationarity: f64,
    pub wall_seconds: f64,
}

/// Rank-d factorization of Ỹ with the singular values split evenly:
/// Â = m^{1/4} U_d S_d^{1/2}, B̂ = m^{1/4} V_d S_d^{1/2}, so that
/// (1/√m) Â B̂ᵀ = U_d S_d V_dᵀ reconstructs the rank-d truncation of Ỹ.
/// The regularizer is ignored.
pub fn spectral_estimate(obs: &ScaledObservation, d: usize) -> Result<BaselineResult> {
    let start = Instant::now();
    let (m, n) = obs.dims();
    if d < 1 || d > m.min(n) {
        return Err(Error::InvalidParameter(format!(
            "rank d = {d} out of range for {m}×{n}"
        )));
    }
    let svd = linalg::top_singular_triplets(obs, d, 1e-8, 1000, SPECTRAL_SEED)?;
    let scale = (m as f64).powf(0.25);
    let mut a_hat = svd.u.clone();
    let mut b_hat = svd.v.clone();
    for t in 0..d {
        let w = scale * svd.s[t].max(0.0).sqrt();
        for i in 0..m {
            a_hat[(i, t)] *= w;
        }
        for j in 0..n {
            b_hat[(j, t)] *= w;
        }
    }
    // Fit term only; the spectral baseline does not see the regularizer.
    let dummy = DenoiserSpec::l2(f64::MIN_POSITIVE, f64::MIN_POSITIVE);
    let bias = obs.bias().clone();
    let final_loss = quadratic_loss(&a_hat.view(), &b_hat.view(), obs, &bias, &dummy)?;
    Ok(BaselineResult {
        a_hat,
        b_hat,
        iterations: 0,
        final_loss,
        stationarity: f64::NAN,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct GdSchedule {
    /// Starting step size; halved whenever a step would increase the loss.
    pub init_step: f64,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for GdSchedule {
    fn default() -> Self {
        GdSchedule { init_step: 0.1, init_seed: 0, init_scale: 1.0 }
    }
}

/// Full-batch gradient descent on the quadratic loss, smooth (L2) objective
/// only. Fixed step with halving backtracking keeps the loss monotone.
pub fn gradient_descent(
    obs: &ScaledObservation,
    bias: &BiasEstimate,
    denoiser: &DenoiserSpec,
    d: usize,
    steps: usize,
    schedule: &GdSchedule,
) -> Result<BaselineResult> {
    let start = Instant::now();
    if denoiser.kind != DenoiserKind::SquaredNorm {
        return Err(Error::InvalidParameter(
            "gradient descent requires the smooth squared-norm objective".into(),
        ));
    }
    denoiser.validate()?;
    if steps < 1 {
        return Err(Error::InvalidParameter("steps must be >= 1".into()));
    }
    let (m, n) = obs.dims();
    let mf = m as f64;
    let inv_sqrt_m = 1.0 / mf.sqrt();
    let mut a = rng::gaussian_matrix(schedule.init_seed, Domain::Init, m, d, schedule.init_scale);
    let mut b = rng::gaussian_matrix(
        schedule.init_seed ^ 0x9e37_79b9,
        Domain::Init,
        n,
        d,
        schedule.init_scale,
    );
    let rate_v = bias.effective_r_v();
    let mut loss = quadratic_loss(&a.view(), &b.view(), obs, bias, denoiser)?;
    let mut step = schedule.init_step;
    let mut used = 0usize;
    for _ in 0..steps {
        // ∇_A = −(1/√m) Ỹ B + (1/m) A (BᵀB) + λ_u R_u⁻¹ A, same shape for B.
        let gb_gram = linalg::gram(&b.view());
        let mut grad_a = obs.right_mul(&b.view());
        grad_a.mapv_inplace(|x| -x * inv_sqrt_m);
        grad_a += &(linalg::matmul(&a.view(), &gb_gram.view()) / mf);
        for i in 0..m {
            let w = denoiser.lambda_u / bias.r_u[i];
            for l in 0..d {
                grad_a[(i, l)] += w * a[(i, l)];
            }
        }
        let ga_gram = linalg::gram(&a.view());
        let mut grad_b = obs.left_tmul(&a.view());
        grad_b.mapv_inplace(|x| -x * inv_sqrt_m);
        grad_b += &(linalg::matmul(&b.view(), &ga_gram.view()) / mf);
        for j in 0..n {
            let w = denoiser.lambda_v / rate_v[j];
            for l in 0..d {
                grad_b[(j, l)] += w * b[(j, l)];
            }
        }
        // Backtracking on the joint step.
        loop {
            let a_try = &a - &(&grad_a * step);
            let b_try = &b - &(&grad_b * step);
            let loss_try = quadratic_loss(&a_try.view(), &b_try.view(), obs, bias, denoiser)?;
            if loss_try.is_finite() && loss_try <= loss {
                a = a_try;
                b = b_try;
                loss = loss_try;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Err(Error::StepSize(step));
            }
        }
        used += 1;
        if loss > 1e12 {
            return Err(Error::StepSize(step));
        }
    }
    let stationarity = crate::amp::residual_at(&a.view(), &b.view(), obs, bias, denoiser);
    Ok(BaselineResult {
        a_hat: a,
        b_hat: b,
        iterations: used,
        final_loss: loss,
        stationarity,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// One gradient step from a given point (used to probe stationarity of
/// external iterates).
pub fn gd_loss_change_one_step(
    a: &Array2<f64>,
    b: &Array2<f64>,
    obs: &ScaledObservation,
    bias: &BiasEstimate,
    denoiser: &DenoiserSpec,
    step: f64,
) -> Result<f64> {
    let rate_v = bias.effective_r_v();
    let (m, _) = obs.dims();
    let mf = m as f64;
    let inv_sqrt_m = 1.0 / mf.sqrt();
    let d = a.ncols();
    let gb_gram = linalg::gram(&b.view());
    let mut grad_a = obs.right_mul(&b.view());
    grad_a.mapv_inplace(|x| -x * inv_sqrt_m);
    grad_a += &(linalg::matmul(&a.view(), &gb_gram.view()) / mf);
    for i in 0..a.nrows() {
        let w = denoiser.lambda_u / bias.r_u[i];
        for l in 0..d {
            grad_a[(i, l)] += w * a[(i, l)];
        }
    }
    let ga_gram = linalg::gram(&a.view());
    let mut grad_b = obs.left_tmul(&a.view());
    grad_b.mapv_inplace(|x| -x * inv_sqrt_m);
    grad_b += &(linalg::matmul(&b.view(), &ga_gram.view()) / mf);
    for j in 0..b.nrows() {
        let w = denoiser.lambda_v / rate_v[j];
        for l in 0..d {
            grad_b[(j, l)] += w * b[(j, l)];
        }
    }
    let loss0 = quadratic_loss(&a.view(), &b.view(), obs, bias, denoiser)?;
    let a1 = a - &(&grad_a * step);
    let b1 = b - &(&grad_b * step);
    let loss1 = quadratic_loss(&a1.view(), &b1.view(), obs, bias, denoiser)?;
    Ok(loss1 - loss0)
}
