//! Counter-based random streams.
//!
//! Every draw in the library comes from a ChaCha8 stream addressed by
//! `(experiment, seed, step, purpose)`. Streams are independent of each
//! other and of the order in which they are requested, so a filter run can
//! be replayed exactly while its parameters change, and seeds can be spread
//! over threads without coordination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Simulation = 1,
    Proposal = 2,
    Resampling = 3,
    Initialization = 4,
    Test = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit identifier for a name, used to key experiments.
pub fn name_id(name: &str) -> u64 {
    // FNV-1a; only needs to be stable across builds.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Root of a family of streams for one (experiment, seed) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub experiment: u64,
    pub seed: u64,
}

impl StreamKey {
    pub fn new(experiment: u64, seed: u64) -> Self {
        StreamKey { experiment, seed }
    }

    /// Derives a child key, e.g. one per dataset inside an experiment.
    pub fn child(&self, index: u64) -> Self {
        StreamKey { experiment: splitmix64(self.experiment ^ 0x5bd1_e995), seed: splitmix64(self.seed ^ index.rotate_left(17)) }
    }

    pub fn stream(&self, step: u64, purpose: Purpose) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut s = splitmix64(self.experiment) ^ self.seed.rotate_left(29);
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s ^ self.seed);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(step.wrapping_mul(8) ^ purpose as u64);
        rng
    }

    pub fn normals(&self, step: u64, purpose: Purpose, n: usize) -> Vec<f64> {
        let mut rng = self.stream(step, purpose);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn uniforms(&self, step: u64, purpose: Purpose, n: usize) -> Vec<f64> {
        let mut rng = self.stream(step, purpose);
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}
