use blramp::amp::{run_amp, AmpConfig, AmpInit, TruthFactors};
use blramp::bias::estimate_bias;
use blramp::denoise::DenoiserSpec;
use blramp::metrics::{normalized_m_mse, quadratic_loss};
use blramp::model::{generate_ground_truth, sample_counts, BiasPrior, EmbeddingPrior, PriorSpec};
use blramp::scorechannel::build_scaled_observation;
use blramp::se::{run_se, SeConfig, SeInit, SePriors};

fn main() {
    let t0 = std::time::Instant::now();
    let (m, n, d, k_it) = (500usize, 750usize, 10usize, 10usize);
    let sparse = std::env::args().any(|a| a == "l1");
    let rho = if sparse { 0.5 } else { 0.0 };
    let denoiser = if sparse {
        DenoiserSpec::l1(1e-3, 1e-3)
    } else {
        DenoiserSpec::l2(1e-3, 1e-3)
    };
    let prior = PriorSpec {
        embedding: EmbeddingPrior { sigma2: 0.1, rho },
        bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 5.0 },
        bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 5.0 },
    };
    let instances = 20;
    let mut sim_loss = vec![vec![]; k_it];
    let mut sim_mse = vec![vec![]; k_it];
    for inst in 0..instances {
        let seed = 1000 + inst as u64;
        let model = generate_ground_truth(&prior, m, n, d, seed).unwrap();
        let z = sample_counts(&model, seed ^ 0xabc).unwrap();
        let bias = estimate_bias(&z).unwrap();
        let obs = build_scaled_observation(&z, &bias).unwrap();
        let truth = TruthFactors::from_model(&model);
        let mut cfg = AmpConfig::new(k_it, d, denoiser, AmpInit::Gaussian { seed: seed ^ 0xdef, scale: 1.0 });
        cfg.track_truth = Some(truth.clone());
        let states = run_amp(&obs, &bias, &cfg).unwrap();
        let loss_truth =
            quadratic_loss(&truth.a.view(), &truth.b.view(), &obs, &bias, &denoiser).unwrap();
        for s in &states {
            let loss =
                quadratic_loss(&s.a_hat.view(), &s.b_hat_next.view(), &obs, &bias, &denoiser)
                    .unwrap();
            let mse = normalized_m_mse(
                &truth.a.view(),
                &truth.b.view(),
                &s.a_hat.view(),
                &s.b_hat_next.view(),
            )
            .unwrap();
            sim_loss[s.k].push(loss / loss_truth);
            sim_mse[s.k].push(mse);
        }
    }
    println!("sim done {:?}", t0.elapsed());

    // SE with N_mc = n, averaged over replicas.
    let priors = SePriors::from_prior_spec(&prior, d, m, n).unwrap();
    let replicas = 20;
    let mut se_loss = vec![vec![]; k_it];
    let mut se_mse = vec![vec![]; k_it];
    for rep in 0..replicas {
        let cfg = SeConfig {
            k_it,
            denoiser,
            priors: priors.clone(),
            init: SeInit::Gaussian { scale: 1.0 },
            n_mc: n,
            beta: m as f64 / n as f64,
            m_ref: m,
            seed: 5000 + rep as u64,
            store_ensembles: false,
        };
        let states = run_se(&cfg).unwrap();
        for s in &states {
            se_loss[s.k].push(s.pred.loss_normalized);
            se_mse[s.k].push(s.pred.mse_m);
        }
    }
    println!("se done {:?}", t0.elapsed());
    let stats = |v: &Vec<f64>| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, (var / v.len() as f64).sqrt())
    };
    println!("k | sim_loss (se.) | pred_loss (se.) | sim_mse | pred_mse | rel gaps");
    for k in 0..k_it {
        let (sl, sle) = stats(&sim_loss[k]);
        let (pl, ple) = stats(&se_loss[k]);
        let (sm, sme) = stats(&sim_mse[k]);
        let (pm, pme) = stats(&se_mse[k]);
        println!(
            "{k}: {sl:.5}±{sle:.5} vs {pl:.5}±{ple:.5} | {sm:.4e}±{sme:.1e} vs {pm:.4e}±{pme:.1e} | dl={:.3} dm={:.3}",
            (sl - pl).abs() / pl.abs().max(1e-12),
            (sm - pm).abs() / pm.abs().max(1e-12)
        );
    }
}
