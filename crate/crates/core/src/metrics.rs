//! Shared evaluation: quadratic loss, normalized correlation MSE, overlap,
//! and frequency-conditioned error. AMP outputs and SE predictions are scored
//! with the same formulas.

use ndarray::{Array1, ArrayView2};
#[cfg(test)]
use ndarray::Array2;
use rayon::prelude::*;

use crate::bias::BiasEstimate;
use crate::denoise::{row_regularizer, DenoiserSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, MatOps};
use crate::scorechannel::ScaledObservation;

/// ½‖Ỹ − (1/√m) A Bᵀ‖²_F + φ_u(R_u^{-1/2}A) + φ_v(R_v^{-1/2}B).
pub fn quadratic_loss(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    obs: &ScaledObservation,
    bias: &BiasEstimate,
    denoiser: &DenoiserSpec,
) -> Result<f64> {
    let (m, n) = obs.dims();
    if a.nrows() != m || b.nrows() != n || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "factors ({}×{}, {}×{}) vs observation {m}×{n}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let fit = if let Some(y) = obs.dense() {
        // Direct residual accumulation, fixed chunk order.
        let d = a.ncols();
        let chunk = 512usize;
        let starts: Vec<usize> = (0..m).step_by(chunk).collect();
        let partials: Vec<f64> = starts
            .par_iter()
            .map(|&i0| {
                let i1 = (i0 + chunk).min(m);
                let mut acc = 0.0;
                for i in i0..i1 {
                    let ai = a.row(i);
                    for j in 0..n {
                        let bj = b.row(j);
                        let mut dot = 0.0;
                        for l in 0..d {
                            dot += ai[l] * bj[l];
                        }
                        let rres = y[(i, j)] - dot * inv_sqrt_m;
                        acc += rres * rres;
                    }
                }
                acc
            })
            .collect();
        0.5 * partials.iter().sum::<f64>()
    } else {
        // ½‖Ỹ‖² − (1/√m) tr(Aᵀ Ỹ B) + (1/2m) tr((AᵀA)(BᵀB))
        let yb = obs.right_mul(b);
        let cross = linalg::dot_entrywise(a, &yb.view());
        let ga = linalg::gram(a);
        let gb = linalg::gram(b);
        0.5 * obs.frob_sq() - inv_sqrt_m * cross
            + 0.5 / m as f64 * linalg::dot_entrywise(&ga.view(), &gb.view())
    };
    let mut reg = 0.0;
    for i in 0..a.nrows() {
        reg += row_regularizer(denoiser.kind, &a.row(i), bias.r_u[i], denoiser.lambda_u);
    }
    let rate_v = bias.effective_r_v();
    for j in 0..b.nrows() {
        reg += row_regularizer(denoiser.kind, &b.row(j), rate_v[j], denoiser.lambda_v);
    }
    Ok(fit + reg)
}

/// Normalized correlation-matrix error Σ(M − M̂)²/ΣM² with M = ABᵀ, M̂ = ÂB̂ᵀ,
/// computed through d×d Gram identities.
pub fn normalized_m_mse(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    a_hat: &ArrayView2<f64>,
    b_hat: &ArrayView2<f64>,
) -> Result<f64> {
    if a.nrows() != a_hat.nrows() || b.nrows() != b_hat.nrows() {
        return Err(Error::DimensionMismatch("factor row counts differ".into()));
    }
    let ga = linalg::gram(a);
    let gb = linalg::gram(b);
    let gah = linalg::gram(a_hat);
    let gbh = linalg::gram(b_hat);
    let ca = linalg::matmul_tn(a, a_hat); // AᵀÂ
    let cb = linalg::matmul_tn(b, b_hat); // BᵀB̂
    let denom = linalg::dot_entrywise(&ga.view(), &gb.view());
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "zero-signal denominator ΣM² = {denom}"
        )));
    }
    let num = denom - 2.0 * linalg::dot_entrywise(&ca.view(), &cb.view())
        + linalg::dot_entrywise(&gah.view(), &gbh.view());
    Ok(num / denom)
}

/// (1/m) Σ_i |a_iᵀâ_i|.
pub fn overlap(a: &ArrayView2<f64>, a_hat: &ArrayView2<f64>) -> f64 {
    assert_eq!(a.dim(), a_hat.dim(), "overlap dims");
    let m = a.nrows();
    let mut acc = 0.0;
    for i in 0..m {
        let mut dot = 0.0;
        for l in 0..a.ncols() {
            dot += a[(i, l)] * a_hat[(i, l)];
        }
        acc += dot.abs();
    }
    acc / m as f64
}

/// Decile (or custom) bin edges from an empirical sample: returns `bins`+1
/// edges spanning the sorted values.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut edges = Vec::with_capacity(bins + 1);
    for k in 0..=bins {
        let pos = (k as f64 / bins as f64 * (sorted.len().saturating_sub(1)) as f64) as usize;
        edges.push(sorted[pos.min(sorted.len() - 1)]);
    }
    edges
}

pub fn bin_index(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    for k in 0..bins {
        if x <= edges[k + 1] {
            return k;
        }
    }
    bins - 1
}

/// Mean of `values` within bins of `keys`; empty bins are None.
pub fn binned_means(keys: &[f64], values: &[f64], edges: &[f64]) -> Vec<Option<f64>> {
    let bins = edges.len() - 1;
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (&k, &v) in keys.iter().zip(values.iter()) {
        let b = bin_index(edges, k);
        sums[b] += v;
        counts[b] += 1;
    }
    sums.iter()
        .zip(counts.iter())
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect()
}

/// Per-entry normalized M-MSE binned by Δ_ij = 1/(r̂_i r̂_j):
/// within each bin, Σ(M−M̂)²/ΣM². Bin edges are Δ quantiles.
pub fn binned_m_mse_by_delta(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    a_hat: &ArrayView2<f64>,
    b_hat: &ArrayView2<f64>,
    bias: &BiasEstimate,
    bins: usize,
) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    let m = a.nrows();
    let n = b.nrows();
    let d = a.ncols();
    if a_hat.nrows() != m || b_hat.nrows() != n {
        return Err(Error::DimensionMismatch("factor row counts differ".into()));
    }
    let rate_v = bias.effective_r_v();
    let mut deltas: Vec<f64> = Vec::with_capacity(m * n);
    for i in 0..m {
        let inv_ru = 1.0 / bias.r_u[i];
        for j in 0..n {
            deltas.push(inv_ru / rate_v[j]);
        }
    }
    let edges = quantile_edges(&deltas, bins);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut num = vec![0.0; bins];
            let mut den = vec![0.0; bins];
            let ai = a.row(i);
            let ahi = a_hat.row(i);
            let inv_ru = 1.0 / bias.r_u[i];
            for j in 0..n {
                let bj = b.row(j);
                let bhj = b_hat.row(j);
                let mut mt = 0.0;
                let mut mh = 0.0;
                for l in 0..d {
                    mt += ai[l] * bj[l];
                    mh += ahi[l] * bhj[l];
                }
                let k = bin_index(&edges, inv_ru / rate_v[j]);
                num[k] += (mt - mh) * (mt - mh);
                den[k] += mt * mt;
            }
            (num, den)
        })
        .collect();
    let mut num = vec![0.0; bins];
    let mut den = vec![0.0; bins];
    for (rn, rd) in rows {
        for k in 0..bins {
            num[k] += rn[k];
            den[k] += rd[k];
        }
    }
    let out = num
        .iter()
        .zip(den.iter())
        .map(|(&s, &t)| if t > 0.0 { Some(s / t) } else { None })
        .collect();
    Ok((edges, out))
}

/// Row-wise squared error ‖a_i − â_i‖² conditioned on r-bins.
pub fn row_mse_by_r_bins(
    a: &ArrayView2<f64>,
    a_hat: &ArrayView2<f64>,
    r: &Array1<f64>,
    edges: &[f64],
) -> Vec<Option<f64>> {
    let errs: Vec<f64> = (0..a.nrows())
        .map(|i| {
            let mut e = 0.0;
            for l in 0..a.ncols() {
                let d = a[(i, l)] - a_hat[(i, l)];
                e += d * d;
            }
            e
        })
        .collect();
    let keys: Vec<f64> = r.iter().copied().collect();
    binned_means(&keys, &errs, edges)
}

/// One evaluation row as emitted to trajectory CSVs.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub k: usize,
    pub loss: f64,
    /// loss / loss-at-truth; absent when there is no truth.
    pub loss_normalized: Option<f64>,
    pub mse_m: f64,
    pub overlap_a: f64,
    pub overlap_b: f64,
    pub cond_mse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub r_bins: usize,
}

/// Score one (Â, B̂) pair against the truth.
pub fn evaluate(
    k: usize,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    a_hat: &ArrayView2<f64>,
    b_hat: &ArrayView2<f64>,
    r_u: &Array1<f64>,
    loss: f64,
    loss_at_truth: Option<f64>,
    bins: usize,
) -> Result<EvalRecord> {
    let mse_m = normalized_m_mse(a, b, a_hat, b_hat)?;
    let cond = if bins > 0 {
        let keys: Vec<f64> = r_u.iter().copied().collect();
        let edges = quantile_edges(&keys, bins);
        row_mse_by_r_bins(a, a_hat, r_u, &edges)
    } else {
        Vec::new()
    };
    Ok(EvalRecord {
        k,
        loss,
        loss_normalized: loss_at_truth.map(|lt| loss / lt),
        mse_m,
        overlap_a: overlap(a, a_hat),
        overlap_b: overlap(b, b_hat),
        cond_mse: cond,
    })
}
