//! Particle filter engine, likelihood estimates and gradient estimators.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, GradientVector, Real, Recording, ScalarFn, Var};
use crate::kalman::{kalman_loglik, KalmanError};
use crate::resampling::{ess, ParticleEnsemble, ResampleError, Resampler};
use crate::rng::{Purpose, StreamKey};
use crate::ssm::{importance_log_weight_unchecked, proposal_sample_unchecked, LgModel, Observations, Proposal, SsmError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] SsmError),
    #[error("all particle weights vanished at step {step}")]
    Degenerate { step: usize },
    #[error("resampling failed at step {step}: {source}")]
    Resample { step: usize, source: ResampleError },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub n: usize,
    pub resampler: Resampler,
    /// Resample when `ESS < threshold * N`; `1.0` resamples every step.
    pub ess_threshold: f64,
    pub snapshots: bool,
}

impl FilterConfig {
    pub fn new(n: usize, resampler: Resampler) -> Self {
        FilterConfig { n, resampler, ess_threshold: 0.5, snapshots: false }
    }

    pub fn every_step(n: usize, resampler: Resampler) -> Self {
        FilterConfig { ess_threshold: 1.0, ..Self::new(n, resampler) }
    }

    fn validate(&self) -> Result<(), FilterError> {
        if self.n < 2 {
            return Err(FilterError::Config(format!("need at least 2 particles, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(FilterError::Config(format!("ESS threshold must lie in [0, 1], got {}", self.ess_threshold)));
        }
        Ok(())
    }
}

/// Particle cloud after weighting at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Row-major `N x dx`.
    pub positions: Vec<f64>,
    /// Positions the particles were proposed from (`None` at the first step).
    pub parents: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Ancestor indices when an index-based resampler ran before this step.
    pub ancestors: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FilterTrace<S> {
    pub n: usize,
    pub dx: usize,
    /// `log p^(y_t | y_{1:t-1})`.
    pub increments: Vec<S>,
    pub loglik: S,
    /// ESS of the weights after weighting at each step.
    pub ess: Vec<f64>,
    /// Whether resampling ran before propagation at each step.
    pub resampled: Vec<bool>,
    pub sinkhorn_iters: Vec<usize>,
    /// Weighted means `sum_i w_t^i X_t^i`, row-major `T x dx`.
    pub filtered_means: Vec<f64>,
    pub snapshots: Option<Vec<Snapshot>>,
}

impl<S: Real> FilterTrace<S> {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn loglik_value(&self) -> f64 {
        self.loglik.value()
    }

    pub fn filtered_mean(&self, t: usize) -> &[f64] {
        &self.filtered_means[t * self.dx..(t + 1) * self.dx]
    }

    /// Average of `ESS_t / N` over steps.
    pub fn mean_ess_fraction(&self) -> f64 {
        self.ess.iter().sum::<f64>() / (self.ess.len() as f64 * self.n as f64)
    }

    /// Columns `step, loglik_increment, ess, resampled, sinkhorn_iters`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loglik_increment,ess,resampled,sinkhorn_iters\n");
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{},{}",
                t + 1,
                self.increments[t].value(),
                self.ess[t],
                u8::from(self.resampled[t]),
                self.sinkhorn_iters[t]
            );
        }
        out
    }
}

/// Runs the filter over all observations. Proposal noise for step `t` comes
/// from `key.normals(t, Proposal, N * dx)` and resampling draws from
/// `key.stream(t, Resampling)`, so the same key replays the same `u` for any
/// parameter value.
pub fn run_filter<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    obs: Observations,
    cfg: &FilterConfig,
    key: StreamKey,
) -> Result<FilterTrace<S>, FilterError> {
    cfg.validate()?;
    model.validate()?;
    proposal.validate(model)?;
    if theta.len() != model.theta_dim() {
        return Err(SsmError::Dimension { what: "theta", expected: model.theta_dim(), found: theta.len() }.into());
    }
    if obs.is_empty() {
        return Err(SsmError::EmptyHorizon.into());
    }
    if obs.dy != model.dy {
        return Err(SsmError::Dimension { what: "observation", expected: model.dy, found: obs.dy }.into());
    }
    let (n, dx) = (cfg.n, model.dx);
    let t_len = obs.len();
    let mut trace = FilterTrace {
        n,
        dx,
        increments: Vec::with_capacity(t_len),
        loglik: S::cst(0.0),
        ess: Vec::with_capacity(t_len),
        resampled: Vec::with_capacity(t_len),
        sinkhorn_iters: Vec::with_capacity(t_len),
        filtered_means: Vec::with_capacity(t_len * dx),
        snapshots: cfg.snapshots.then(Vec::new),
    };
    let uniform = -(n as f64).ln();
    let mut positions: Vec<S> = Vec::new();
    let mut log_w: Vec<S> = vec![S::cst(uniform); n];
    let mut weights = vec![1.0 / n as f64; n];
    for t in 0..t_len {
        let y = obs.get(t);
        let mut ancestors = None;
        let mut resampled = false;
        let mut iters = 0;
        if t > 0 && (cfg.ess_threshold >= 1.0 || ess(&weights) < cfg.ess_threshold * n as f64) {
            let ens = ParticleEnsemble { dim: dx, positions: std::mem::take(&mut positions), log_weights: log_w, weights };
            let mut rng = key.stream(t as u64, Purpose::Resampling);
            let out = cfg.resampler.resample(&ens, &mut rng).map_err(|source| FilterError::Resample { step: t + 1, source })?;
            positions = out.ensemble.positions;
            log_w = out.ensemble.log_weights;
            ancestors = out.ancestors;
            iters = out.iterations;
            resampled = true;
        }
        let noise = key.normals(t as u64, Purpose::Proposal, n * dx);
        let mut next = Vec::with_capacity(n * dx);
        let mut log_omega = Vec::with_capacity(n);
        for i in 0..n {
            let prev = (t > 0).then(|| &positions[i * dx..(i + 1) * dx]);
            let x = proposal_sample_unchecked(model, theta, proposal, prev, y, &noise[i * dx..(i + 1) * dx]);
            log_omega.push(importance_log_weight_unchecked(model, theta, proposal, prev, &x, y));
            next.extend(x);
        }
        let unnorm: Vec<S> = log_w.iter().zip(&log_omega).map(|(&a, &b)| a + b).collect();
        let inc = S::log_sum_exp(&unnorm);
        if !inc.value().is_finite() {
            return Err(FilterError::Degenerate { step: t + 1 });
        }
        log_w = unnorm.iter().map(|&l| l - inc).collect();
        weights = log_w.iter().map(|l| l.value().exp()).collect();
        for k in 0..dx {
            trace.filtered_means.push((0..n).map(|i| weights[i] * next[i * dx + k].value()).sum());
        }
        if let Some(snaps) = trace.snapshots.as_mut() {
            snaps.push(Snapshot {
                positions: next.iter().map(|v| v.value()).collect(),
                parents: (t > 0).then(|| positions.iter().map(|v| v.value()).collect()),
                weights: weights.clone(),
                ancestors,
            });
        }
        positions = next;
        trace.increments.push(inc);
        trace.ess.push(ess(&weights));
        trace.resampled.push(resampled);
        trace.sinkhorn_iters.push(iters);
    }
    trace.loglik = S::sum(&trace.increments);
    Ok(trace)
}

/// Mean and spread of `(l^ - l) / T` over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
    pub per_seed: Vec<f64>,
    /// Set when `std` is a placeholder because only one seed ran.
    pub single_seed: bool,
}

impl ElboSummary {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len();
        let mean = per_seed.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        ElboSummary { mean, std, n_seeds: n, per_seed, single_seed: n == 1 }
    }
}

/// Runs one filter per key (in parallel) and summarizes `(l^ - l)/T` against
/// the exact Kalman log-likelihood.
pub fn elbo_estimate(
    model: &LgModel,
    theta: &[f64],
    phi: Option<&[f64]>,
    obs: Observations,
    cfg: &FilterConfig,
    keys: &[StreamKey],
) -> Result<ElboSummary, FilterError> {
    if keys.is_empty() {
        return Err(FilterError::Config("no seeds given".into()));
    }
    let exact = kalman_loglik(model, theta, obs)?.loglik;
    let t_len = obs.len() as f64;
    let proposal = phi.map_or(Proposal::Bootstrap, Proposal::Learned);
    let per_seed = keys
        .par_iter()
        .map(|&k| run_filter(model, theta, &proposal, obs, cfg, k).map(|tr| (tr.loglik - exact) / t_len))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(ElboSummary::from_values(per_seed))
}

/// Log-likelihood estimate and its gradient with respect to `theta ++ phi`.
/// `phi` always occupies `model.phi_dim()` slots; without a learned
/// proposal those entries are zero.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub loglik: f64,
    pub gradient: GradientVector,
    pub mean_ess_fraction: f64,
}

impl GradientEstimate {
    pub fn theta_part(&self, model: &LgModel) -> &[f64] {
        &self.gradient.as_slice()[..model.theta_dim()]
    }

    pub fn phi_part(&self, model: &LgModel) -> &[f64] {
        &self.gradient.as_slice()[model.theta_dim()..]
    }
}

fn declare(model: &LgModel, theta: &[f64], phi: Option<&[f64]>) -> Result<(Recording, Vec<Var>, Vec<Var>), FilterError> {
    let rec = Recording::new();
    let ones = vec![1.0; model.phi_dim()];
    let phi_vals = phi.unwrap_or(&ones);
    let params: Vec<f64> = theta.iter().chain(phi_vals).copied().collect();
    let vars = rec.declare_parameters(&params)?;
    let (th, ph) = vars.split_at(theta.len());
    Ok((rec, th.to_vec(), ph.to_vec()))
}

fn gradient_of(
    model: &LgModel,
    theta: &[f64],
    phi: Option<&[f64]>,
    obs: Observations,
    cfg: &FilterConfig,
    key: StreamKey,
    detached: bool,
) -> Result<GradientEstimate, FilterError> {
    let (rec, th, ph) = declare(model, theta, phi)?;
    let proposal = match (phi, detached) {
        (Some(_), _) => Proposal::Learned(&ph),
        (None, true) => Proposal::DetachedBootstrap,
        (None, false) => Proposal::Bootstrap,
    };
    let trace = run_filter(model, &th, &proposal, obs, cfg, key)?;
    let gradient = rec.grad(trace.loglik)?;
    Ok(GradientEstimate { loglik: trace.loglik.value(), gradient, mean_ess_fraction: trace.mean_ess_fraction() })
}

/// Reverse-mode gradient of the DET filter's log-likelihood for fixed
/// noise. Particles move pathwise with `theta` (bootstrap) or with `phi`
/// (learned proposal).
pub fn dpf_gradient(
    model: &LgModel,
    theta: &[f64],
    phi: Option<&[f64]>,
    obs: Observations,
    cfg: &FilterConfig,
    key: StreamKey,
) -> Result<GradientEstimate, FilterError> {
    if !matches!(cfg.resampler, Resampler::Det(_)) {
        return Err(FilterError::Config("the DPF gradient needs the det resampler".into()));
    }
    gradient_of(model, theta, phi, obs, cfg, key, false)
}

/// Gradient that ignores resampling: ancestor indices are detached and, in
/// bootstrap mode, particles are drawn with theta detached so each step
/// contributes `sum_i w_t^i grad log f_theta(X_t^i | X_{t-1}^{A^i})`. With a
/// learned proposal the particles stay reparameterized in `phi` and only the
/// resampling step is left out.
pub fn biased_elbo_gradient(
    model: &LgModel,
    theta: &[f64],
    phi: Option<&[f64]>,
    obs: Observations,
    cfg: &FilterConfig,
    key: StreamKey,
) -> Result<GradientEstimate, FilterError> {
    if matches!(cfg.resampler, Resampler::Det(_) | Resampler::ExactEt) {
        return Err(FilterError::Config("the biased gradient needs an index-based resampler".into()));
    }
    gradient_of(model, theta, phi, obs, cfg, key, true)
}

/// `(1/B) sum_b l^(theta; u_b)` for a fixed list of noise keys.
pub fn smle_objective<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    obs: Observations,
    cfg: &FilterConfig,
    keys: &[StreamKey],
) -> Result<S, FilterError> {
    if keys.is_empty() {
        return Err(FilterError::Config("SMLE needs at least one noise key".into()));
    }
    let runs = keys.iter().map(|&k| run_filter(model, theta, proposal, obs, cfg, k).map(|t| t.loglik)).collect::<Result<Vec<S>, _>>()?;
    Ok(S::sum(&runs) / keys.len() as f64)
}

/// Value and theta-gradient of [`smle_objective`] in bootstrap mode.
pub fn smle_gradient(
    model: &LgModel,
    theta: &[f64],
    obs: Observations,
    cfg: &FilterConfig,
    keys: &[StreamKey],
) -> Result<(f64, Vec<f64>), FilterError> {
    let (rec, th, _) = declare(model, theta, None)?;
    let value = smle_objective(model, &th, &Proposal::Bootstrap, obs, cfg, keys)?;
    let g = rec.grad(value)?;
    Ok((value.value(), g.as_slice()[..theta.len()].to_vec()))
}

/// `theta ++ phi -> l^` for one noise key, as a [`ScalarFn`]. With
/// `learned = false` the trailing phi entries are ignored. Panics if the
/// filter fails, so only use it where the filter is known to run.
#[derive(Debug, Clone)]
pub struct FilterLoglik<'a> {
    pub model: &'a LgModel,
    pub obs: Observations<'a>,
    pub cfg: FilterConfig,
    pub key: StreamKey,
    pub learned: bool,
}

impl ScalarFn for FilterLoglik<'_> {
    fn eval<S: Real>(&self, p: &[S]) -> S {
        let (th, ph) = p.split_at(self.model.theta_dim());
        let proposal = if self.learned { Proposal::Learned(ph) } else { Proposal::Bootstrap };
        run_filter(self.model, th, &proposal, self.obs, &self.cfg, self.key).expect("filter run").loglik
    }
}
