//! Monte-Carlo state evolution.
//!
//! Deterministic d×d trajectories (M̄, Q̄, F̄, Γ̄) per side per iteration, with
//! the joint row law of (truth, estimate, bias) realized as fresh i.i.d.
//! ensembles each iteration. B-side moment matrices are m-normalized, i.e.
//! M̄ᵇ = (1/β)E(𝓑ᵀ𝓑̂) and Q̄ᵇ = (1/β)E(𝓑̂ᵀ𝓑̂), so the finite-size AMP
//! quantities (all divided by m) converge to them when m ≠ n. The Onsager
//! matrices Γ̄ are plain expectations of denoiser Jacobians, matching the
//! per-side averages of the iteration.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoise::{denoise_rows, row_regularizer, CapPolicy, DenoiserSpec};
use crate::error::{Error, Result};
use crate::linalg::{self};
use crate::metrics::{binned_means, quantile_edges};
use crate::model::{BiasPrior, EmbeddingPrior, PriorSpec};
use crate::rng::{stream, Domain};

/// Normalized large-system bias law for one side.
#[derive(Debug, Clone)]
pub enum BiasLaw {
    /// r = exp(log_mult + X), X ~ Exp(rate).
    ExpRate { rate: f64, log_mult: f64 },
    /// Uniform draw from a fixed table (finite-m Zipf, empirical biases).
    Table(Array1<f64>),
    Constant(f64),
}

impl BiasLaw {
    fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        match self {
            BiasLaw::ExpRate { rate, log_mult } => {
                let exp = Exp::new(*rate).expect("validated rate");
                (log_mult + exp.sample(rng)).exp()
            }
            BiasLaw::Table(t) => {
                let i = (rng.random::<u64>() % t.len() as u64) as usize;
                t[i]
            }
            BiasLaw::Constant(c) => *c,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            BiasLaw::ExpRate { rate, log_mult } => log_mult.exp() * rate / (rate - 1.0),
            BiasLaw::Table(t) => t.sum() / t.len() as f64,
            BiasLaw::Constant(c) => *c,
        }
    }
}

/// Joint law of one side's (embedding row, bias).
#[derive(Debug, Clone)]
pub enum SideLaw {
    Independent { embedding: EmbeddingPrior, d: usize, bias: BiasLaw },
    /// Bootstrap over observed (row, bias) pairs; the coupling matters.
    EmpiricalJoint { rows: Array2<f64>, r: Array1<f64> },
}

impl SideLaw {
    pub fn dim(&self) -> usize {
        match self {
            SideLaw::Independent { d, .. } => *d,
            SideLaw::EmpiricalJoint { rows, .. } => rows.ncols(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SideLaw::Independent { embedding, d, bias } => {
                embedding.validate()?;
                if *d < 1 {
                    return Err(Error::InvalidParameter("d must be >= 1".into()));
                }
                if let BiasLaw::ExpRate { rate, .. } = bias {
                    if !(*rate > 1.0) {
                        return Err(Error::InvalidParameter(format!(
                            "exponential bias law needs rate > 1 for a finite limit mean, got {rate}"
                        )));
                    }
                }
                Ok(())
            }
            SideLaw::EmpiricalJoint { rows, r } => {
                if rows.nrows() != r.len() || rows.nrows() == 0 {
                    return Err(Error::DimensionMismatch("empirical prior table".into()));
                }
                if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(Error::InvalidParameter("empirical bias table entries".into()));
                }
                Ok(())
            }
        }
    }

    /// Draw (embedding row u, bias r); the scaled row is √r·u.
    fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, f64) {
        match self {
            SideLaw::Independent { embedding, d, bias } => {
                let u = embedding.sample_row(*d, rng);
                let r = bias.sample(rng);
                (u, r)
            }
            SideLaw::EmpiricalJoint { rows, r } => {
                let i = (rng.random::<u64>() % rows.nrows() as u64) as usize;
                (rows.row(i).to_vec(), r[i])
            }
        }
    }

    /// Exact E[R uuᵀ] = E(𝒜𝒜ᵀ) under this law.
    pub fn scaled_second_moment(&self) -> Array2<f64> {
        match self {
            SideLaw::Independent { embedding, d, bias } => {
                Array2::eye(*d) * (bias.mean() * embedding.coord_second_moment(*d))
            }
            SideLaw::EmpiricalJoint { rows, r } => {
                let d = rows.ncols();
                let mut acc = Array2::zeros((d, d));
                for (row, &ri) in rows.outer_iter().zip(r.iter()) {
                    for a in 0..d {
                        for b in 0..d {
                            acc[(a, b)] += ri * row[a] * row[b];
                        }
                    }
                }
                acc / rows.nrows() as f64
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SePriors {
    pub side_a: SideLaw,
    pub side_b: SideLaw,
}

impl SePriors {
    /// Limit laws implied by a generation prior after normalization: the
    /// u-side raw law divided by its mean, the v-side raw law multiplied by
    /// that mean. m and n give table sizes for finite-size laws (Zipf).
    pub fn from_prior_spec(prior: &PriorSpec, d: usize, m: usize, n: usize) -> Result<SePriors> {
        prior.validate()?;
        let (law_u, mean_u) = normalized_u_law(&prior.bias_u, m)?;
        let law_v = scaled_v_law(&prior.bias_v, mean_u, n)?;
        Ok(SePriors {
            side_a: SideLaw::Independent { embedding: prior.embedding.clone(), d, bias: law_u },
            side_b: SideLaw::Independent { embedding: prior.embedding.clone(), d, bias: law_v },
        })
    }
}

fn normalized_u_law(prior: &BiasPrior, m: usize) -> Result<(BiasLaw, f64)> {
    match prior {
        BiasPrior::ExpShift { rate, shift } => {
            if !(*rate > 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "exponential bias rate {rate} <= 1 has no limiting mean"
                )));
            }
            let mean = shift.exp() * rate / (rate - 1.0);
            Ok((BiasLaw::ExpRate { rate: *rate, log_mult: shift - mean.ln() }, mean))
        }
        BiasPrior::Zipf { c0, .. } => {
            // Finite-m table normalized to mean one; the α ≥ 1 limit law has
            // no mean, so the finite-size law stands in for it.
            let mut rng = stream(0, Domain::BiasU, 0);
            let raw = prior.sample_raw(m, &mut rng)?;
            let mean = raw.sum() / m as f64; // = c0 by construction
            Ok((BiasLaw::Table(raw.mapv(|x| x / mean)), *c0))
        }
        BiasPrior::Constant { value } => Ok((BiasLaw::Constant(1.0), value.exp())),
    }
}

fn scaled_v_law(prior: &BiasPrior, mult: f64, n: usize) -> Result<BiasLaw> {
    match prior {
        BiasPrior::ExpShift { rate, shift } => {
            if !(*rate > 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "exponential bias rate {rate} <= 1 has no limiting mean"
                )));
            }
            Ok(BiasLaw::ExpRate { rate: *rate, log_mult: shift + mult.ln() })
        }
        BiasPrior::Zipf { .. } => {
            let mut rng = stream(0, Domain::BiasV, 0);
            let raw = prior.sample_raw(n, &mut rng)?;
            Ok(BiasLaw::Table(raw.mapv(|x| x * mult)))
        }
        BiasPrior::Constant { value } => Ok(BiasLaw::Constant(value.exp() * mult)),
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SeInit {
    Zero,
    Gaussian { scale: f64 },
    /// 𝓑̂₀ = corr·𝓑 + noise·ξ: a warm start correlated with the truth, for
    /// studying the recursion away from the uninformative fixed point.
    Informed { corr: f64, noise: f64 },
}

#[derive(Debug, Clone)]
pub struct SeConfig {
    pub k_it: usize,
    pub denoiser: DenoiserSpec,
    pub priors: SePriors,
    pub init: SeInit,
    pub n_mc: usize,
    /// β = m/n.
    pub beta: f64,
    /// Finite-instance m used to scale absolute loss predictions.
    pub m_ref: usize,
    pub seed: u64,
    /// Keep per-iteration ensembles in the states (needed for conditional
    /// metrics; switch off for very large N_mc).
    pub store_ensembles: bool,
}

#[derive(Debug, Clone)]
pub struct SeEnsembleA {
    pub truth: Array2<f64>,
    pub est: Array2<f64>,
    pub r: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SeEnsembleB {
    pub truth: Array2<f64>,
    pub est_k: Array2<f64>,
    pub est_next: Array2<f64>,
    pub r: Array1<f64>,
}

/// Scalar predictions for the finite instance (m_ref, m_ref/β).
#[derive(Debug, Clone, Default)]
pub struct SePrediction {
    pub loss: f64,
    pub loss_at_truth: f64,
    pub loss_normalized: f64,
    /// Normalized correlation MSE at the (Âₖ, B̂ₖ₊₁) pairing.
    pub mse_m: f64,
    pub row_mse_a: f64,
    pub overlap_a: f64,
    pub overlap_b: f64,
}

#[derive(Debug, Clone)]
pub struct SeState {
    pub k: usize,
    pub m_a: Array2<f64>,
    pub q_a: Array2<f64>,
    pub f_a: Array2<f64>,
    pub gamma_a: Array2<f64>,
    pub m_b: Array2<f64>,
    pub q_b: Array2<f64>,
    pub f_b: Array2<f64>,
    pub gamma_b: Array2<f64>,
    pub m_b_next: Array2<f64>,
    pub q_b_next: Array2<f64>,
    pub gamma_a_next: Array2<f64>,
    pub t_a: Array2<f64>,
    pub t_b: Array2<f64>,
    pub ensemble_a: Option<SeEnsembleA>,
    pub ensemble_b: Option<SeEnsembleB>,
    pub pred: SePrediction,
}

fn encode_member(k: usize, side: u64, s: usize) -> u64 {
    ((k as u64) << 40) | (side << 32) | s as u64
}

struct Sampled {
    truth: Array2<f64>,
    r: Array1<f64>,
}

/// Draw N fresh (scaled row, bias) pairs plus two d-vector noise blocks per
/// member (consumed later in a fixed order).
fn sample_side(
    law: &SideLaw,
    n_mc: usize,
    d: usize,
    seed: u64,
    k: usize,
    side: u64,
) -> (Sampled, Array2<f64>, Array2<f64>) {
    let mut truth = Array2::zeros((n_mc, d));
    let mut r = Array1::zeros(n_mc);
    let mut noise1 = Array2::zeros((n_mc, d));
    let mut noise2 = Array2::zeros((n_mc, d));
    for s in 0..n_mc {
        let mut rng = stream(seed, Domain::SeEnsemble, encode_member(k, side, s));
        let (u, ri) = law.sample(&mut rng);
        let sqrt_r = ri.sqrt();
        for l in 0..d {
            truth[(s, l)] = sqrt_r * u[l];
        }
        r[s] = ri;
        for l in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            noise1[(s, l)] = g;
        }
        for l in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            noise2[(s, l)] = g;
        }
    }
    (Sampled { truth, r }, noise1, noise2)
}

/// x·M + noise·S for row-major ensembles.
fn affine(truth: &Array2<f64>, m: &Array2<f64>, noise: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    let mut p = linalg::matmul(&truth.view(), &m.view());
    p += &linalg::matmul(&noise.view(), &s.view());
    p
}

/// Mean of outer products E[xᵀy] over paired ensemble rows (d×d).
fn mean_outer(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    linalg::matmul_tn(&x.view(), &y.view()) / x.nrows() as f64
}

fn trace_prod(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let d = x.nrows();
    let mut acc = 0.0;
    for l in 0..d {
        for l2 in 0..d {
            acc += x[(l, l2)] * y[(l2, l)];
        }
    }
    acc
}

pub fn run_se(cfg: &SeConfig) -> Result<Vec<SeState>> {
    cfg.denoiser.validate()?;
    cfg.priors.side_a.validate()?;
    cfg.priors.side_b.validate()?;
    if cfg.n_mc < 1 || cfg.k_it < 1 {
        return Err(Error::InvalidParameter("need n_mc >= 1 and k_it >= 1".into()));
    }
    if !(cfg.beta > 0.0) || !cfg.beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta = {}", cfg.beta)));
    }
    let d = cfg.priors.side_a.dim();
    if cfg.priors.side_b.dim() != d {
        return Err(Error::DimensionMismatch("prior dims differ across sides".into()));
    }
    let n_mc = cfg.n_mc;
    let beta = cfg.beta;
    let mf = cfg.m_ref as f64;
    let nf = mf / beta;
    let t_a = cfg.priors.side_a.scaled_second_moment();
    let t_b = cfg.priors.side_b.scaled_second_moment() / beta;
    let tr_tt = linalg::dot_entrywise(&t_a.view(), &t_b.view());

    let mut gamma_a: Array2<f64> = Array2::zeros((d, d));
    // (M̄ᵃ, Q̄ᵃ, F̄ᵇ) of the previous iteration, for rebuilding 𝓑̂ₖ.
    let mut prev_a_bars: Option<(Array2<f64>, Array2<f64>, Array2<f64>)> = None;
    let mut states: Vec<SeState> = Vec::with_capacity(cfg.k_it);

    for k in 0..cfg.k_it {
        // Fresh B ensemble carrying 𝓑̂ₖ.
        let (b_side, b_noise_k, b_noise_next) =
            sample_side(&cfg.priors.side_b, n_mc, d, cfg.seed, k, 0);
        let b_est_k: Array2<f64> = match (&prev_a_bars, k) {
            (None, 0) => match cfg.init {
                SeInit::Zero => Array2::zeros((n_mc, d)),
                SeInit::Gaussian { scale } => {
                    if !(scale > 0.0) {
                        return Err(Error::InvalidParameter("init scale must be positive".into()));
                    }
                    b_noise_k.mapv(|x| x * scale)
                }
                SeInit::Informed { corr, noise } => {
                    let mut est = b_side.truth.mapv(|x| x * corr);
                    est += &b_noise_k.mapv(|x| x * noise);
                    est
                }
            },
            (Some((m_a_prev, q_a_prev, f_b_prev)), _) => {
                let s = linalg::sym_sqrt_psd(&q_a_prev.view());
                let p = affine(&b_side.truth, m_a_prev, &b_noise_k, &s);
                let (est, _) = denoise_rows(
                    cfg.denoiser.kind,
                    &p.view(),
                    &b_side.r,
                    &f_b_prev.view(),
                    cfg.denoiser.lambda_v,
                    None,
                    CapPolicy::ReturnPartial,
                )?;
                est
            }
            (None, _) => unreachable!(),
        };
        if !linalg::is_finite(&b_est_k.view()) {
            return Err(Error::Divergence { iteration: k, location: "SE B ensemble".into() });
        }
        let m_b = mean_outer(&b_side.truth, &b_est_k) / beta;
        let q_b = mean_outer(&b_est_k, &b_est_k) / beta;
        let f_a = &q_b - &gamma_a;

        // Fresh A ensemble.
        let (a_side, a_noise, _) = sample_side(&cfg.priors.side_a, n_mc, d, cfg.seed, k, 1);
        let sqrt_q_b = linalg::sym_sqrt_psd(&q_b.view());
        let p_a = affine(&a_side.truth, &m_b, &a_noise, &sqrt_q_b);
        let (a_est, jac_sum_a) = denoise_rows(
            cfg.denoiser.kind,
            &p_a.view(),
            &a_side.r,
            &f_a.view(),
            cfg.denoiser.lambda_u,
            None,
            CapPolicy::ReturnPartial,
        )?;
        if !linalg::is_finite(&a_est.view()) {
            return Err(Error::Divergence { iteration: k, location: "SE A ensemble".into() });
        }
        let gamma_b = &jac_sum_a / n_mc as f64;
        let m_a = mean_outer(&a_side.truth, &a_est);
        let q_a = mean_outer(&a_est, &a_est);
        let f_b = &q_a - &gamma_b;

        // 𝓑̂ₖ₊₁ on the same B members with fresh noise.
        let sqrt_q_a = linalg::sym_sqrt_psd(&q_a.view());
        let p_b = affine(&b_side.truth, &m_a, &b_noise_next, &sqrt_q_a);
        let (b_est_next, jac_sum_b) = denoise_rows(
            cfg.denoiser.kind,
            &p_b.view(),
            &b_side.r,
            &f_b.view(),
            cfg.denoiser.lambda_v,
            None,
            CapPolicy::ReturnPartial,
        )?;
        if !linalg::is_finite(&b_est_next.view()) {
            return Err(Error::Divergence { iteration: k, location: "SE B-next ensemble".into() });
        }
        let gamma_a_next = &jac_sum_b / n_mc as f64;
        let m_b_next = mean_outer(&b_side.truth, &b_est_next) / beta;
        let q_b_next = mean_outer(&b_est_next, &b_est_next) / beta;

        // Predictions for the finite (m_ref, m_ref/β) instance at the
        // (Âₖ, B̂ₖ₊₁) pairing.
        //   L = ½‖Ỹ‖² − (1/√m) tr(B̂ₖ₊₁ᵀ Ỹᵀ Âₖ) + (1/2m)‖Âₖ B̂ₖ₊₁ᵀ‖² + reg
        // with the iteration identity (1/√m) Ỹᵀ Âₖ = Pₖᵇ + B̂ₖ Γₖᵇ. The
        // cross-iterate correlation E(𝓑̂ₖ₊₁ᵀ𝓑̂ₖ) is estimated with noises
        // independent across iterations, which the fresh-ensemble recursion
        // provides.
        let p_dot = {
            let mut acc = 0.0;
            for s in 0..n_mc {
                for l in 0..d {
                    acc += b_est_next[(s, l)] * p_b[(s, l)];
                }
            }
            acc / (n_mc as f64 * beta)
        };
        let x_cross = mean_outer(&b_est_next, &b_est_k) / beta;
        let mut reg_a_hat = 0.0;
        let mut reg_a_truth = 0.0;
        let mut row_mse_a = 0.0;
        let mut overlap_a = 0.0;
        for s in 0..n_mc {
            reg_a_hat += row_regularizer(
                cfg.denoiser.kind,
                &a_est.row(s),
                a_side.r[s],
                cfg.denoiser.lambda_u,
            );
            reg_a_truth += row_regularizer(
                cfg.denoiser.kind,
                &a_side.truth.row(s),
                a_side.r[s],
                cfg.denoiser.lambda_u,
            );
            let mut err = 0.0;
            let mut dot = 0.0;
            for l in 0..d {
                let dlt = a_side.truth[(s, l)] - a_est[(s, l)];
                err += dlt * dlt;
                dot += a_side.truth[(s, l)] * a_est[(s, l)];
            }
            row_mse_a += err;
            overlap_a += dot.abs();
        }
        reg_a_hat /= n_mc as f64;
        reg_a_truth /= n_mc as f64;
        row_mse_a /= n_mc as f64;
        overlap_a /= n_mc as f64;
        let mut reg_b_hat = 0.0;
        let mut reg_b_truth = 0.0;
        let mut overlap_b = 0.0;
        for s in 0..n_mc {
            reg_b_hat += row_regularizer(
                cfg.denoiser.kind,
                &b_est_next.row(s),
                b_side.r[s],
                cfg.denoiser.lambda_v,
            );
            reg_b_truth += row_regularizer(
                cfg.denoiser.kind,
                &b_side.truth.row(s),
                b_side.r[s],
                cfg.denoiser.lambda_v,
            );
            let mut dot = 0.0;
            for l in 0..d {
                dot += b_side.truth[(s, l)] * b_est_next[(s, l)];
            }
            overlap_b += dot.abs();
        }
        reg_b_hat /= n_mc as f64;
        reg_b_truth /= n_mc as f64;
        overlap_b /= n_mc as f64;

        let half_y = 0.5 * mf * nf + 0.5 * mf * tr_tt;
        let cross = mf * (p_dot + trace_prod(&x_cross, &gamma_b));
        let quad = 0.5 * mf * linalg::dot_entrywise(&q_a.view(), &q_b_next.view());
        let reg = mf * reg_a_hat + nf * reg_b_hat;
        let loss = half_y - cross + quad + reg;
        let loss_at_truth = 0.5 * mf * nf + mf * reg_a_truth + nf * reg_b_truth;
        let mse_m = if tr_tt > 0.0 {
            (tr_tt - 2.0 * linalg::dot_entrywise(&m_a.view(), &m_b_next.view())
                + linalg::dot_entrywise(&q_a.view(), &q_b_next.view()))
                / tr_tt
        } else {
            f64::NAN
        };

        let pred = SePrediction {
            loss,
            loss_at_truth,
            loss_normalized: loss / loss_at_truth,
            mse_m,
            row_mse_a,
            overlap_a,
            overlap_b,
        };

        let (ens_a, ens_b) = if cfg.store_ensembles {
            (
                Some(SeEnsembleA { truth: a_side.truth, est: a_est, r: a_side.r }),
                Some(SeEnsembleB {
                    truth: b_side.truth,
                    est_k: b_est_k,
                    est_next: b_est_next,
                    r: b_side.r,
                }),
            )
        } else {
            (None, None)
        };
        states.push(SeState {
            k,
            m_a: m_a.clone(),
            q_a: q_a.clone(),
            f_a,
            gamma_a: gamma_a.clone(),
            m_b,
            q_b,
            f_b: f_b.clone(),
            gamma_b,
            m_b_next,
            q_b_next,
            gamma_a_next: gamma_a_next.clone(),
            t_a: t_a.clone(),
            t_b: t_b.clone(),
            ensemble_a: ens_a,
            ensemble_b: ens_b,
            pred,
        });
        gamma_a = gamma_a_next;
        prev_a_bars = Some((m_a, q_a, f_b));
    }
    Ok(states)
}

/// Metric record assembled from one SE state's ensembles.
#[derive(Debug, Clone)]
pub struct SeMetricRecord {
    pub row_mse_a: f64,
    pub overlap_a: f64,
    pub mse_m: f64,
    pub bin_edges: Vec<f64>,
    /// Conditional E(‖𝒜 − 𝒜̂ₖ‖² | Rᵘ bin); None marks an empty bin.
    pub cond_mse: Vec<Option<f64>>,
}

pub fn se_metrics(state: &SeState, bin_edges: Option<&[f64]>) -> Result<SeMetricRecord> {
    let ens = state
        .ensemble_a
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("state stored without ensembles".into()))?;
    let n = ens.truth.nrows();
    if n == 0 {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    let keys: Vec<f64> = ens.r.iter().copied().collect();
    let edges: Vec<f64> = match bin_edges {
        Some(e) => e.to_vec(),
        None => quantile_edges(&keys, 10),
    };
    let errs: Vec<f64> = (0..n)
        .map(|s| {
            let mut e = 0.0;
            for l in 0..ens.truth.ncols() {
                let d = ens.truth[(s, l)] - ens.est[(s, l)];
                e += d * d;
            }
            e
        })
        .collect();
    let cond = binned_means(&keys, &errs, &edges);
    Ok(SeMetricRecord {
        row_mse_a: state.pred.row_mse_a,
        overlap_a: state.pred.overlap_a,
        mse_m: state.pred.mse_m,
        bin_edges: edges,
        cond_mse: cond,
    })
}
