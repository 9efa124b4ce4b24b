//! Poisson sampling over several orders of magnitude of the rate.
//!
//! Inversion by multiplication below λ = 10, transformed rejection with
//! squeeze (PTRS, Hörmann 1993) above. Zipf-style biases produce rates from
//! near zero up to 1e10 in one matrix, so both branches matter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SWITCH: f64 = 10.0;

pub fn sample_poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    debug_assert!(lambda.is_finite() && lambda >= 0.0);
    if lambda == 0.0 {
        0
    } else if lambda < SWITCH {
        inversion(rng, lambda)
    } else {
        ptrs(rng, lambda)
    }
}

fn inversion(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    let threshold = (-lambda).exp();
    let mut k = 0u64;
    let mut prod = 1.0f64;
    loop {
        prod *= rng.random::<f64>();
        if prod <= threshold {
            return k;
        }
        k += 1;
        if k > 10_000 {
            // Unreachable for lambda < 10 except with probability ~0.
            return k;
        }
    }
}

fn ptrs(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v = rng.random::<f64>();
        let us = 0.5 - u.abs();
        let kf = (2.0 * a / us + b) * u + lambda + 0.43;
        if us >= 0.07 && v <= v_r {
            return kf as u64;
        }
        if kf < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let k = kf.floor();
        let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
        let rhs = k * loglam - lambda - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// ln(k!) exactly for small k, Stirling series beyond.
pub fn ln_factorial(k: u64) -> f64 {
    if k < 2 {
        return 0.0;
    }
    if k <= 20 {
        let mut acc = 0.0;
        for i in 2..=k {
            acc += (i as f64).ln();
        }
        return acc;
    }
    let x = k as f64;
    let x2 = x * x;
    (x + 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x2 * x)
        + 1.0 / (1260.0 * x2 * x2 * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn moments(lambda: f64, n: usize, seed: u64) -> (f64, f64, f64) {
        let mut rng = stream(seed, Domain::Counts, 0);
        let draws: Vec<f64> = (0..n).map(|_| sample_poisson(&mut rng, lambda) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        (mean, var, m4)
    }

    #[test]
    fn ln_factorial_consistency() {
        // Stirling branch against the exact recurrence at the switch point.
        let exact21 = ln_factorial(20) + 21f64.ln();
        assert!((ln_factorial(21) - exact21).abs() < 1e-12);
        assert!((ln_factorial(5) - 120f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inversion_moments_lambda4() {
        let (mean, var, m4) = moments(4.0, 100_000, 42);
        assert!((mean - 4.0).abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.15, "var {var}");
        // Fourth central moment of Poisson(λ) is λ + 3λ² = 52.
        assert!((m4 - 52.0).abs() < 0.05 * 52.0, "m4 {m4}");
    }

    #[test]
    fn ptrs_moments_large_lambda() {
        for &lambda in &[10.0, 47.3, 1000.0, 2.5e6] {
            let n = 100_000;
            let (mean, var, _) = moments(lambda, n, 7);
            let se_mean = (lambda / n as f64).sqrt();
            assert!(
                (mean - lambda).abs() < 4.0 * se_mean,
                "lambda {lambda}: mean {mean}"
            );
            // Var(sample var) ≈ (m4 - var²)/n = (λ + 2λ²)/n for Poisson.
            let se_var = ((lambda + 2.0 * lambda * lambda) / n as f64).sqrt();
            assert!(
                (var - lambda).abs() < 4.0 * se_var,
                "lambda {lambda}: var {var}"
            );
        }
    }

    #[test]
    fn deterministic_given_stream() {
        let mut a = stream(3, Domain::Counts, 5);
        let mut b = stream(3, Domain::Counts, 5);
        for &lambda in &[0.3, 9.9, 10.1, 88.0] {
            assert_eq!(sample_poisson(&mut a, lambda), sample_poisson(&mut b, lambda));
        }
    }
}
