//! Bias estimation by frequency counting.
//!
//! r̂_i^u = (m/Z_tot) Σ_j Z_ij and r̂_j^v = (n/Z_tot) Σ_i Z_ij, so the scale
//! identities Σ r̂^u = m and Σ r̂^v = n hold for every nonempty matrix. These
//! vectors are normalized to empirical mean one per side; the observed rate
//! scale Z_tot/(m·n) is kept separately as `budget`, and the effective pair
//! rate is rate_u(i)·rate_v(j) = rowsum_i·colsum_j/Z_tot — the convention
//! matching a model normalized to mean-one r_u with the sample budget carried
//! by r_v.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CountMatrix, GroundTruthModel};

/// Estimated (or adopted) bias vectors. `z_tot` is zero when the vectors come
/// from a ground-truth model instead of counts.
#[derive(Debug, Clone)]
pub struct BiasEstimate {
    /// Mean-one row frequencies (Σ = m).
    pub r_u: Array1<f64>,
    /// Mean-one column frequencies (Σ = n).
    pub r_v: Array1<f64>,
    pub s_u: Array1<f64>,
    pub s_v: Array1<f64>,
    pub z_tot: u64,
    /// Observed counts per pair, Z_tot/(m·n); folded into the v side when
    /// effective rates are needed. 1 when the vectors are already model-scale.
    pub budget: f64,
}

impl BiasEstimate {
    pub fn dims(&self) -> (usize, usize) {
        (self.r_u.len(), self.r_v.len())
    }

    /// Adopt the true biases of a model (already model-scale: budget 1).
    pub fn from_model(model: &GroundTruthModel) -> Self {
        BiasEstimate {
            r_u: model.r_u.clone(),
            r_v: model.r_v.clone(),
            s_u: model.s_u.clone(),
            s_v: model.s_v.clone(),
            z_tot: 0,
            budget: 1.0,
        }
    }

    /// Wrap model-scale vectors directly (budget 1).
    pub fn from_vectors(r_u: Array1<f64>, r_v: Array1<f64>) -> Result<Self> {
        for (i, &r) in r_u.iter().chain(r_v.iter()).enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "bias vector entry {i} is {r}"
                )));
            }
        }
        let s_u = r_u.mapv(f64::ln);
        let s_v = r_v.mapv(f64::ln);
        Ok(BiasEstimate { r_u, r_v, s_u, s_v, z_tot: 0, budget: 1.0 })
    }

    /// Effective u-side rates (the mean-one vectors themselves).
    pub fn rate_u(&self) -> &Array1<f64> {
        &self.r_u
    }

    /// Effective v-side rates: r̂_v scaled by the budget, so that
    /// rate_u(i)·rate_v(j) estimates the pair rate λ_ij.
    pub fn effective_r_v(&self) -> Array1<f64> {
        self.r_v.mapv(|r| r * self.budget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMarginPolicy {
    /// Zero row/column sums are an error listing the degenerate indices.
    Error,
    /// Floor the affected r̂ at 1/Z_tot before taking logs.
    Floor,
}

pub fn estimate_bias(z: &CountMatrix) -> Result<BiasEstimate> {
    estimate_bias_with(z, ZeroMarginPolicy::Error)
}

pub fn estimate_bias_with(z: &CountMatrix, policy: ZeroMarginPolicy) -> Result<BiasEstimate> {
    let (m, n) = z.dims();
    let z_tot = z.z_tot()?;
    if z_tot == 0 {
        return Err(Error::EmptyData);
    }
    let row_sums = z.row_sums();
    let col_sums = z.col_sums();
    let zero_rows: Vec<usize> = row_sums
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == 0)
        .map(|(i, _)| i)
        .collect();
    let zero_cols: Vec<usize> = col_sums
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == 0)
        .map(|(j, _)| j)
        .collect();
    if policy == ZeroMarginPolicy::Error && (!zero_rows.is_empty() || !zero_cols.is_empty()) {
        return Err(Error::DegenerateSums { rows: zero_rows, cols: zero_cols });
    }
    let zt = z_tot as f64;
    let floor = 1.0 / zt;
    let r_u = Array1::from_iter(row_sums.iter().map(|&s| {
        let r = m as f64 * s as f64 / zt;
        if r > 0.0 { r } else { floor }
    }));
    let r_v = Array1::from_iter(col_sums.iter().map(|&s| {
        let r = n as f64 * s as f64 / zt;
        if r > 0.0 { r } else { floor }
    }));
    let s_u = r_u.mapv(f64::ln);
    let s_v = r_v.mapv(f64::ln);
    let budget = zt / (m as f64 * n as f64);
    Ok(BiasEstimate { r_u, r_v, s_u, s_v, z_tot, budget })
}

/// Mean squared estimation error per side at the model scale:
/// ((1/m) Σ (r_u − r̂_u)², (1/n) Σ (r_v − rate_v)²).
pub fn bias_consistency_report(
    truth: &GroundTruthModel,
    est: &BiasEstimate,
) -> Result<(f64, f64)> {
    let (m, n, _) = truth.dims();
    if est.dims() != (m, n) {
        return Err(Error::DimensionMismatch(format!(
            "estimate dims {:?} vs model ({m}, {n})",
            est.dims()
        )));
    }
    let mse_u = truth
        .r_u
        .iter()
        .zip(est.r_u.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / m as f64;
    let rate_v = est.effective_r_v();
    let mse_v = truth
        .r_v
        .iter()
        .zip(rate_v.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    Ok((mse_u, mse_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_ground_truth, sample_counts, BiasPrior, EmbeddingPrior, PriorSpec};

    fn counts(m: usize, n: usize, entries: &[(u32, u32, u64)]) -> CountMatrix {
        CountMatrix::from_triplets(m, n, entries.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_counts_give_unit_biases() {
        let z = counts(2, 2, &[(0, 0, 2), (1, 1, 2)]);
        let est = estimate_bias(&z).unwrap();
        assert_eq!(est.z_tot, 4);
        for &r in est.r_u.iter().chain(est.r_v.iter()) {
            assert!((r - 1.0).abs() < 1e-15);
        }
        assert!(est.s_u.iter().all(|&s| s.abs() < 1e-15));
    }

    #[test]
    fn uneven_counts_hand_values() {
        // Z = [[3,1],[1,1]]: Z_tot = 6, row sums (4, 2), col sums (4, 2).
        let z = counts(2, 2, &[(0, 0, 3), (0, 1, 1), (1, 0, 1), (1, 1, 1)]);
        let est = estimate_bias(&z).unwrap();
        assert!((est.r_u[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((est.r_u[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((est.r_v[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((est.r_v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scale_identities_hold() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.0 },
            bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 2.0 },
            bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 2.0 },
        };
        let model = generate_ground_truth(&prior, 60, 90, 4, 2).unwrap();
        let z = sample_counts(&model, 3).unwrap();
        let est = estimate_bias(&z).unwrap();
        assert!((est.r_u.sum() - 60.0).abs() < 1e-9);
        assert!((est.r_v.sum() - 90.0).abs() < 1e-9);
        // Monotone in the row sums.
        let rs = z.row_sums();
        for i in 1..60 {
            if rs[i] > rs[i - 1] {
                assert!(est.r_u[i] > est.r_u[i - 1]);
            }
        }
    }

    #[test]
    fn empty_matrix_rejected() {
        let z = counts(3, 3, &[]);
        match estimate_bias(&z) {
            Err(Error::EmptyData) => {}
            other => panic!("expected EmptyData, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_margins_reported_or_floored() {
        // Column 1 is empty.
        let z = counts(2, 2, &[(0, 0, 1), (1, 0, 3)]);
        match estimate_bias(&z) {
            Err(Error::DegenerateSums { rows, cols }) => {
                assert!(rows.is_empty());
                assert_eq!(cols, vec![1]);
            }
            other => panic!("expected DegenerateSums, got {other:?}"),
        }
        let est = estimate_bias_with(&z, ZeroMarginPolicy::Floor).unwrap();
        assert!((est.r_v[1] - 0.25).abs() < 1e-15); // 1/Z_tot
        assert!(est.s_v[1].is_finite());
    }

    #[test]
    fn plug_in_identity_is_exact() {
        // An estimate built from the model's own marginals reproduces r.
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.0 },
            bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 1.0 },
            bias_v: BiasPrior::Constant { value: 0.5 },
        };
        let model = generate_ground_truth(&prior, 25, 35, 3, 7).unwrap();
        let est = BiasEstimate::from_model(&model);
        let (eu, ev) = bias_consistency_report(&model, &est).unwrap();
        assert!(eu < 1e-20 && ev < 1e-20);
    }

    #[test]
    fn consistency_improves_with_size() {
        // Lemma-style check: error decreases as n grows with m/n fixed.
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.0 },
            bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 1.5 },
            bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 1.5 },
        };
        let mut prev = f64::INFINITY;
        for &n in &[120usize, 240, 480] {
            let m = 2 * n / 3;
            let mut acc = 0.0;
            for seed in 0..6u64 {
                let model = generate_ground_truth(&prior, m, n, 3, seed).unwrap();
                let z = sample_counts(&model, 1000 + seed).unwrap();
                let est = estimate_bias(&z).unwrap();
                let (eu, _) = bias_consistency_report(&model, &est).unwrap();
                acc += eu;
            }
            let avg = acc / 6.0;
            assert!(avg < prev, "mse did not decrease: {avg} vs {prev} at n = {n}");
            prev = avg;
        }
    }
}
