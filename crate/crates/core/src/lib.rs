//! Differentiable particle filtering with entropy-regularized transport
//! resampling, plus exact oracles for linear-Gaussian models.

pub mod autodiff;
pub mod filter;
pub mod harness;
pub mod kalman;
pub mod ot;
pub mod resampling;
pub mod rng;
pub mod ssm;

pub use autodiff::{GradientVector, Real, Recording, Var};
pub use filter::{FilterConfig, FilterError, FilterTrace};
pub use harness::{Experiment, ExperimentConfig, HarnessError};
pub use resampling::{DetConfig, ParticleEnsemble, Resampler};
pub use rng::StreamKey;
pub use ssm::{LgModel, Observations, Proposal, Trajectory};
