//! Seed-averaged checks against exact Kalman and 1-D transport oracles.

use dpf_core::filter::{dpf_gradient, run_filter};
use dpf_core::kalman::{kalman_loglik, kalman_mle};
use dpf_core::resampling::{det_resample, DetConfig, ParticleEnsemble};
use dpf_core::rng::{name_id, Purpose, StreamKey};
use dpf_core::{FilterConfig, LgModel, Proposal, Resampler};
use rayon::prelude::*;

fn key(name: &str, i: u64) -> StreamKey {
    StreamKey::new(name_id(name), i)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn dpf_gradient_is_near_zero_at_the_mle() {
    let model = LgModel::diagonal_2d();
    let traj = model.simulate(&[0.5, 0.5], 20, key("stat/mle/data", 0)).unwrap();
    let mle = kalman_mle(&model, &[0.5, 0.5], traj.observations(), 1e-8, 100).unwrap();
    assert!(mle.score_norm <= 1e-3);
    let cfg = FilterConfig::every_step(128, Resampler::Det(DetConfig::default()));
    let grads: Vec<Vec<f64>> = (0..32u64)
        .into_par_iter()
        .map(|s| dpf_gradient(&model, &mle.theta, None, traj.observations(), &cfg, key("stat/mle/filter", s)).unwrap().theta_part(&model).to_vec())
        .collect();
    for j in 0..2 {
        let col: Vec<f64> = grads.iter().map(|g| g[j]).collect();
        let m = col.iter().sum::<f64>() / 32.0;
        let se = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 31.0 / 32.0).sqrt();
        assert!(m.abs() <= 3.0 * se, "coord {j}: mean {m} se {se}");
    }
}

/// Exact W2 in one dimension between equal-weight points `a` and the
/// weighted measure `(b, w)`, via the quantile coupling.
fn w2_1d(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mut a = a.to_vec();
    a.sort_by(f64::total_cmp);
    let mut bw: Vec<(f64, f64)> = b.iter().copied().zip(w.iter().copied()).collect();
    bw.sort_by(|p, q| p.0.total_cmp(&q.0));
    let step = 1.0 / a.len() as f64;
    let (mut i, mut j) = (0, 0);
    let (mut left_a, mut left_b) = (step, bw[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < bw.len() {
        let m = left_a.min(left_b);
        cost += m * (a[i] - bw[j].0).powi(2);
        left_a -= m;
        left_b -= m;
        if left_a <= 1e-15 {
            i += 1;
            left_a = step;
        }
        if left_b <= 1e-15 {
            j += 1;
            if j < bw.len() {
                left_b = bw[j].1;
            }
        }
    }
    cost.sqrt()
}

#[test]
fn quantile_w2_oracle() {
    assert!((w2_1d(&[0.0, 1.0], &[0.0, 1.0], &[0.5, 0.5])).abs() < 1e-12);
    // All mass at 2 against points 0 and 1: sqrt((4 + 1) / 2).
    assert!((w2_1d(&[0.0, 1.0], &[2.0, 5.0], &[1.0, 0.0]) - 2.5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn det_wasserstein_error_shrinks_with_n() {
    let mut medians = Vec::new();
    for n in [8usize, 32, 128, 512] {
        let eps = 1.0 / (n as f64).ln();
        let errs: Vec<f64> = (0..9u64)
            .into_par_iter()
            .map(|s| {
                let k = key("stat/w2", s).child(n as u64);
                // Weighted sample from N(0,1) targeting N(1,1): w ∝ exp(x).
                let x = k.normals(0, Purpose::Test, n);
                let ens = ParticleEnsemble::new(x.clone(), 1, x.clone()).unwrap();
                let out = det_resample(&ens, &DetConfig::with_epsilon(eps)).unwrap().ensemble.positions;
                w2_1d(&out, &x, &ens.weights)
            })
            .collect();
        medians.push(median(errs));
    }
    assert!(medians.windows(2).all(|p| p[1] < p[0]), "{medians:?}");
}

#[test]
fn filtered_means_approach_kalman() {
    let model = LgModel::diagonal_2d();
    let theta = [0.5, 0.5];
    let traj = model.simulate(&theta, 30, key("stat/means/data", 0)).unwrap();
    let kal = kalman_loglik(&model, &theta, traj.observations()).unwrap();
    for (name, res) in [("pf", Resampler::Multinomial), ("dpf", Resampler::Det(DetConfig::default()))] {
        let mut prev = f64::INFINITY;
        for n in [16usize, 64, 256] {
            let cfg = FilterConfig::every_step(n, res);
            let errs: Vec<f64> = (0..5u64)
                .map(|s| {
                    let tr = run_filter(&model, &theta, &Proposal::Bootstrap, traj.observations(), &cfg, key("stat/means/filter", s)).unwrap();
                    let sq: f64 = (0..30).map(|t| tr.filtered_mean(t).iter().zip(kal.filtered_means[t].iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
                    (sq / 60.0).sqrt()
                })
                .collect();
            let m = median(errs);
            assert!(m < prev, "{name} N={n}: {m} vs {prev}");
            prev = m;
        }
    }
}
