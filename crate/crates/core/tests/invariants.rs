//! Property tests for module invariants.

use dpf_core::autodiff::{finite_diff_check, value_and_grad, Real, Recording, ScalarFn};
use dpf_core::harness::{fmt_f64, ExperimentConfig};
use dpf_core::kalman::kalman_loglik;
use dpf_core::ot::{cost_matrix, sinkhorn_potentials, transport_plan, SinkhornConfig};
use dpf_core::resampling::{det_resample, ess, multinomial_resample, systematic_resample, DetConfig, ParticleEnsemble};
use dpf_core::rng::StreamKey;
use dpf_core::LgModel;
use proptest::prelude::*;
use rand::SeedableRng;

/// A random straight-line program over the inputs. Each op combines two
/// earlier nodes.
#[derive(Debug, Clone)]
struct Program {
    ops: Vec<(u8, usize, usize)>,
}

impl Program {
    fn run<S: Real>(&self, x: &[S]) -> S {
        let mut nodes: Vec<S> = x.to_vec();
        for &(op, i, j) in &self.ops {
            let (a, b) = (nodes[i % nodes.len()], nodes[j % nodes.len()]);
            let v = match op % 8 {
                0 => a + b,
                1 => a * b * 0.5,
                2 => a - b * 0.7,
                3 => (a * 0.3).exp(),
                4 => (a.square() + 1.0).ln(),
                5 => (a.square() + 1.0).sqrt(),
                6 => a / (b.square() + 1.0),
                _ => S::log_sum_exp(&[a, b]),
            };
            nodes.push(v);
        }
        let tail = &nodes[x.len()..];
        if tail.is_empty() {
            S::sum(&nodes)
        } else {
            S::sum(tail)
        }
    }
}

impl ScalarFn for Program {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        self.run(x)
    }
}

fn program() -> impl Strategy<Value = Program> {
    prop::collection::vec((0u8..8, 0usize..16, 0usize..16), 1..10).prop_map(|ops| Program { ops })
}

fn point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn ensemble() -> impl Strategy<Value = ParticleEnsemble<f64>> {
    (2usize..20, 1usize..4).prop_flat_map(|(n, d)| {
        (prop::collection::vec(-3.0f64..3.0, n * d), prop::collection::vec(-4.0f64..4.0, n))
            .prop_map(move |(x, lw)| ParticleEnsemble::new(x, d, lw).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_are_linear(p in program(), q in program(), x in point(3), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let rec = Recording::new();
        let v = rec.declare_parameters(&x).unwrap();
        let gp = rec.grad(p.run(&v)).unwrap();
        let gq = rec.grad(q.run(&v)).unwrap();
        let gc = rec.grad(p.run(&v) * alpha + q.run(&v) * beta).unwrap();
        for k in 0..3 {
            let want = alpha * gp.as_slice()[k] + beta * gq.as_slice()[k];
            prop_assert!((gc.as_slice()[k] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn random_compositions_pass_gradcheck(p in program(), x in point(3)) {
        let r = finite_diff_check(&p, &x, 1e-5).unwrap();
        prop_assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn recordings_are_deterministic(p in program(), x in point(3)) {
        let (v1, g1) = value_and_grad(&p, &x).unwrap();
        let (v2, g2) = value_and_grad(&p, &x).unwrap();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert_eq!(g1.as_slice().iter().map(|g| g.to_bits()).collect::<Vec<_>>(), g2.as_slice().iter().map(|g| g.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(v1.to_bits(), p.run(&x).to_bits());
    }

    #[test]
    fn det_is_affine_unbiased_and_stays_in_the_hull(ens in ensemble(), eps in 0.1f64..2.0) {
        let cfg = DetConfig::with_epsilon(eps);
        let out = det_resample(&ens, &cfg).unwrap().ensemble;
        let (n, d) = (ens.len(), ens.dim);
        // Rows of the plan sum to 1/N only up to the solver tolerance.
        let scale = ens.positions.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let slack = 10.0 * n as f64 * cfg.tol * (1.0 + scale);
        let (want, got) = (ens.mean(), out.mean());
        for k in 0..d {
            prop_assert!((want[k] - got[k]).abs() <= 1e-8);
            let col = (0..n).map(|i| ens.positions[i * d + k]);
            let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            for i in 0..n {
                let v = out.positions[i * d + k];
                prop_assert!(v >= lo - slack && v <= hi + slack, "{v} outside [{lo}, {hi}]");
            }
        }
        prop_assert!(out.weights.iter().all(|w| (w - 1.0 / n as f64).abs() <= 1e-12));
    }

    #[test]
    fn index_resamplers_copy_input_particles(ens in ensemble(), seed in 0u64..1000) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for out in [multinomial_resample(&ens, &mut rng).unwrap(), systematic_resample(&ens, &mut rng).unwrap()] {
            let anc = out.ancestors.clone().unwrap();
            prop_assert_eq!(anc.len(), ens.len());
            for (i, &a) in anc.iter().enumerate() {
                prop_assert!(a < ens.len());
                prop_assert_eq!(out.ensemble.position(i), ens.position(a));
            }
        }
    }

    #[test]
    fn ess_is_between_one_and_n(lw in prop::collection::vec(-20.0f64..20.0, 1..50)) {
        let n = lw.len();
        let ens = ParticleEnsemble::new(vec![0.0; n], 1, lw).unwrap();
        let e = ess(&ens.weights);
        prop_assert!(e >= 1.0 - 1e-9 && e <= n as f64 + 1e-9);
    }

    #[test]
    fn sinkhorn_plans_meet_their_marginals(n in 1usize..9, m in 1usize..9, eps in 0.05f64..2.0, seed in 0u64..10_000) {
        let k = StreamKey::new(3, seed);
        let x = k.normals(0, dpf_core::rng::Purpose::Test, n * 2);
        let y = k.normals(1, dpf_core::rng::Purpose::Test, m * 2);
        let simplex = |v: Vec<f64>| { let e: Vec<f64> = v.iter().map(|z| z.exp()).collect(); let s: f64 = e.iter().sum(); e.iter().map(|z| z / s).collect::<Vec<f64>>() };
        let a = simplex(k.normals(2, dpf_core::rng::Purpose::Test, n));
        let b = simplex(k.normals(3, dpf_core::rng::Purpose::Test, m));
        let c = cost_matrix(&x, &y, 2, false).unwrap();
        let cfg = SinkhornConfig { epsilon: eps, tol: 1e-10, max_iter: 200_000 };
        let res = sinkhorn_potentials(&a, &b, &c, &cfg).unwrap();
        let plan = transport_plan(&a, &b, &c, &res).unwrap();
        prop_assert!(plan.max_residual() <= 1e-6);
        prop_assert!(plan.p.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn normalized_costs_are_scale_free(ens in ensemble(), scale in 0.1f64..10.0) {
        let d = ens.dim;
        let scaled: Vec<f64> = ens.positions.iter().map(|v| v * scale).collect();
        let c1 = cost_matrix(&ens.positions, &ens.positions, d, true).unwrap();
        let c2 = cost_matrix(&scaled, &scaled, d, true).unwrap();
        for (u, v) in c1.data.iter().zip(&c2.data) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
        let n = ens.len();
        for i in 0..n {
            prop_assert_eq!(c1.get(i, i), 0.0);
            for j in 0..n {
                prop_assert!(c1.get(i, j) >= 0.0);
                prop_assert_eq!(c1.get(i, j), c1.get(j, i));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kalman_loglik_is_the_sum_of_increments(th in prop::collection::vec(-0.95f64..0.95, 2), t in 1usize..40, seed in 0u64..1000) {
        let model = LgModel::diagonal_2d();
        let traj = model.simulate(&th, t, StreamKey::new(1, seed)).unwrap();
        let again = model.simulate(&th, t, StreamKey::new(1, seed)).unwrap();
        prop_assert_eq!(&traj, &again);
        let out = kalman_loglik(&model, &th, traj.observations()).unwrap();
        prop_assert!((out.loglik - out.increments.iter().sum::<f64>()).abs() <= 1e-9);
        for p in &out.filtered_covs {
            prop_assert!((p - p.transpose()).abs().max() <= 1e-12);
            prop_assert!(p.clone().symmetric_eigenvalues().iter().all(|&e| e >= -1e-10));
        }
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, n in 2usize..1000, lr in 1e-6f64..1.0, eps in 0.01f64..5.0, paper in any::<bool>()) {
        let mut c = if paper { ExperimentConfig::paper() } else { ExperimentConfig::desk() };
        c.seed = seed;
        c.table1.n = n;
        c.proposal.lr = lr;
        c.estimators.epsilon = eps;
        c.table1.methods.push(format!("det({eps})"));
        let text = c.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn csv_floats_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}
