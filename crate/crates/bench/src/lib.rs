//! Shared fixtures for the benchmarks.

use dpf_core::resampling::ParticleEnsemble;
use dpf_core::rng::{Purpose, StreamKey};
use dpf_core::{LgModel, Trajectory};

/// Gaussian particles with log-weights of standard deviation 2.
pub fn ensemble(n: usize, dim: usize, seed: u64) -> ParticleEnsemble<f64> {
    let k = StreamKey::new(0xbe_4c, seed);
    let x = k.normals(0, Purpose::Test, n * dim);
    let lw = k.normals(1, Purpose::Test, n).iter().map(|z| 2.0 * z).collect();
    ParticleEnsemble::new(x, dim, lw).expect("valid ensemble")
}

/// Data from the 2-D diagonal model at theta = (0.5, 0.5).
pub fn lg_data(t_len: usize) -> (LgModel, Trajectory) {
    let model = LgModel::diagonal_2d();
    let traj = model.simulate(&[0.5, 0.5], t_len, StreamKey::new(0xda7a, 0)).expect("simulate");
    (model, traj)
}
