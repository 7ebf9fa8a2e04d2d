//! Linear-Gaussian state-space models.
//!
//! States follow `x_1 ~ N(0, p0 I)`, `x_t = F x_{t-1} + N(0, q I)` and are
//! observed through `y_t = H x_t + N(0, r I)` with `H = I_{dy,dx}` (the first
//! `dy` coordinates). `F` is either `diag(theta)` with `theta` learnable, or
//! a fixed matrix.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Real;
use crate::rng::{Purpose, StreamKey};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsmError {
    #[error("{what} has length {found}, expected {expected}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("trajectory length must be at least 1")]
    EmptyHorizon,
    #[error("proposal parameter {index} is {value}; entries must be positive")]
    NonPositiveProposal { index: usize, value: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    /// `F = diag(theta)`; theta has one entry per state coordinate.
    Diagonal,
    /// Fixed row-major `dx x dx` matrix; the model has no theta.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgModel {
    pub dx: usize,
    pub dy: usize,
    pub transition: Transition,
    /// Transition noise variance.
    pub q: f64,
    /// Observation noise variance.
    pub r: f64,
    /// Variance of the initial state.
    pub p0: f64,
}

impl LgModel {
    /// Two-dimensional model with diagonal transition, `q = 0.5`, `r = 0.1`.
    pub fn diagonal_2d() -> Self {
        Self::diagonal(2, 0.5, 0.1)
    }

    pub fn diagonal(dim: usize, q: f64, r: f64) -> Self {
        LgModel { dx: dim, dy: dim, transition: Transition::Diagonal, q, r, p0: 1.0 }
    }

    /// Banded model with `A_ij = 0.42^(|i-j|+1)`, unit noise and `dy <= dx`
    /// observed coordinates.
    pub fn banded(dx: usize, dy: usize) -> Self {
        assert!(dy >= 1 && dy <= dx, "need 1 <= dy <= dx");
        let mut a = vec![0.0; dx * dx];
        for i in 0..dx {
            for j in 0..dx {
                a[i * dx + j] = 0.42f64.powi((i as i32 - j as i32).abs() + 1);
            }
        }
        LgModel { dx, dy, transition: Transition::Fixed(a), q: 1.0, r: 1.0, p0: 1.0 }
    }

    /// Number of entries in theta.
    pub fn theta_dim(&self) -> usize {
        match self.transition {
            Transition::Diagonal => self.dx,
            Transition::Fixed(_) => 0,
        }
    }

    /// Number of proposal parameters.
    pub fn phi_dim(&self) -> usize {
        self.dx
    }

    pub fn validate(&self) -> Result<(), SsmError> {
        if self.dx == 0 || self.dy == 0 || self.dy > self.dx {
            return Err(SsmError::InvalidModel(format!("need 1 <= dy <= dx, got dx={} dy={}", self.dx, self.dy)));
        }
        if let Transition::Fixed(a) = &self.transition {
            check_len("transition matrix", self.dx * self.dx, a.len())?;
        }
        for (name, v) in [("q", self.q), ("r", self.r), ("p0", self.p0)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SsmError::InvalidModel(format!("{name} must be a finite non-negative variance, got {v}")));
            }
        }
        Ok(())
    }

    fn check_theta<S>(&self, theta: &[S]) -> Result<(), SsmError> {
        check_len("theta", self.theta_dim(), theta.len())
    }

    /// Transition matrix as a dense row-major array.
    pub fn transition_matrix(&self, theta: &[f64]) -> Result<Vec<f64>, SsmError> {
        self.check_theta(theta)?;
        Ok(match &self.transition {
            Transition::Diagonal => {
                let mut a = vec![0.0; self.dx * self.dx];
                for i in 0..self.dx {
                    a[i * self.dx + i] = theta[i];
                }
                a
            }
            Transition::Fixed(a) => a.clone(),
        })
    }

    /// `F x_prev`.
    pub fn transition_mean<S: Real>(&self, theta: &[S], x_prev: &[S]) -> Vec<S> {
        match &self.transition {
            Transition::Diagonal => theta.iter().zip(x_prev).map(|(&t, &x)| t * x).collect(),
            Transition::Fixed(a) => a.chunks(self.dx).map(|row| S::affine(x_prev, row, 0.0)).collect(),
        }
    }

    pub fn transition_logpdf<S: Real>(&self, theta: &[S], x_prev: &[S], x: &[S]) -> Result<S, SsmError> {
        self.check_theta(theta)?;
        check_len("x_prev", self.dx, x_prev.len())?;
        check_len("x", self.dx, x.len())?;
        let mean = self.transition_mean(theta, x_prev);
        Ok(iso_gauss_logpdf(x, &mean, self.q))
    }

    pub fn prior_logpdf<S: Real>(&self, x: &[S]) -> Result<S, SsmError> {
        check_len("x", self.dx, x.len())?;
        let zero = vec![S::cst(0.0); self.dx];
        Ok(iso_gauss_logpdf(x, &zero, self.p0))
    }

    pub fn observation_logpdf<S: Real>(&self, x: &[S], y: &[f64]) -> Result<S, SsmError> {
        check_len("x", self.dx, x.len())?;
        check_len("y", self.dy, y.len())?;
        let y: Vec<S> = y.iter().map(|&v| S::cst(v)).collect();
        Ok(iso_gauss_logpdf(&y, &x[..self.dy], self.r))
    }

    /// Simulates `t_len` steps. Zero variances are allowed here.
    pub fn simulate(&self, theta: &[f64], t_len: usize, key: StreamKey) -> Result<Trajectory, SsmError> {
        self.validate()?;
        self.check_theta(theta)?;
        if t_len == 0 {
            return Err(SsmError::EmptyHorizon);
        }
        let mut rng = key.stream(0, Purpose::Simulation);
        let mut normal = move || -> f64 { rng.sample(StandardNormal) };
        let mut states = Vec::with_capacity(t_len * self.dx);
        let mut observations = Vec::with_capacity(t_len * self.dy);
        let mut x: Vec<f64> = (0..self.dx).map(|_| self.p0.sqrt() * normal()).collect();
        for t in 0..t_len {
            if t > 0 {
                let mean = self.transition_mean(theta, &x);
                x = mean.iter().map(|m| m + self.q.sqrt() * normal()).collect();
            }
            states.extend_from_slice(&x);
            for &xi in &x[..self.dy] {
                observations.push(xi + self.r.sqrt() * normal());
            }
        }
        Ok(Trajectory { dx: self.dx, dy: self.dy, states, observations, seed: key.seed })
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), SsmError> {
    if expected == found {
        Ok(())
    } else {
        Err(SsmError::Dimension { what, expected, found })
    }
}

/// `log N(x; mean, var I)`.
pub fn iso_gauss_logpdf<S: Real>(x: &[S], mean: &[S], var: f64) -> S {
    let d = x.len() as f64;
    S::sq_dist(x, mean) * (-0.5 / var) - 0.5 * d * (LN_2PI + var.ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dx: usize,
    pub dy: usize,
    /// Row-major `T x dx`.
    pub states: Vec<f64>,
    /// Row-major `T x dy`.
    pub observations: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len() / self.dy
    }
    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dx..(t + 1) * self.dx]
    }
    pub fn observation(&self, t: usize) -> &[f64] {
        &self.observations[t * self.dy..(t + 1) * self.dy]
    }
    pub fn observations(&self) -> Observations<'_> {
        Observations { dy: self.dy, data: &self.observations }
    }
}

/// Borrowed `T x dy` observation block.
#[derive(Debug, Clone, Copy)]
pub struct Observations<'a> {
    pub dy: usize,
    pub data: &'a [f64],
}

impl<'a> Observations<'a> {
    pub fn new(dy: usize, data: &'a [f64]) -> Self {
        assert!(dy > 0 && data.len() % dy == 0, "observation block is not T x dy");
        Observations { dy, data }
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.dy
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn get(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.dy..(t + 1) * self.dy]
    }
    /// First `t_len` steps.
    pub fn truncate(&self, t_len: usize) -> Self {
        Observations { dy: self.dy, data: &self.data[..t_len * self.dy] }
    }
}

/// Proposal distribution used to move particles.
#[derive(Debug, Clone, Copy)]
pub enum Proposal<'a, S> {
    /// Sample from the transition (prior at the first step); the weight is
    /// the observation density.
    Bootstrap,
    /// Sample from the transition with theta detached, and weight by the
    /// density ratio. The value is identical to `Bootstrap` while the
    /// gradient in theta flows only through the transition density, not
    /// through the sampled positions.
    DetachedBootstrap,
    /// Learned Gaussian proposal with positive parameters `phi` (length
    /// `dx`). Its precision is `diag(phi_i * lambda_i)` with
    /// `lambda_i = 1/s + [i < dy]/r` and its mean is
    /// `precision^-1 (m/s + Gamma_phi y / r)`, where `m, s` are the
    /// transition mean and variance (prior at the first step) and
    /// `Gamma_phi` puts `phi_i` on the leading diagonal of a `dx x dy`
    /// matrix. At `phi = 1` this is the locally optimal proposal.
    Learned(&'a [S]),
}

impl<'a, S: Real> Proposal<'a, S> {
    pub fn validate(&self, model: &LgModel) -> Result<(), SsmError> {
        if let Proposal::Learned(phi) = self {
            check_len("phi", model.phi_dim(), phi.len())?;
            if let Some((index, v)) = phi.iter().enumerate().find(|(_, v)| !(v.value() > 0.0)) {
                return Err(SsmError::NonPositiveProposal { index, value: v.value() });
            }
        }
        Ok(())
    }
}

/// Mean and per-coordinate precision of a Gaussian proposal.
struct GaussProposal<S> {
    mean: Vec<S>,
    precision: Vec<S>,
}

fn learned_moments<S: Real>(model: &LgModel, theta: &[S], phi: &[S], x_prev: Option<&[S]>, y: &[f64]) -> GaussProposal<S> {
    let (m, s) = match x_prev {
        Some(xp) => (model.transition_mean(theta, xp), model.q),
        None => (vec![S::cst(0.0); model.dx], model.p0),
    };
    let mut mean = Vec::with_capacity(model.dx);
    let mut precision = Vec::with_capacity(model.dx);
    for i in 0..model.dx {
        let observed = i < model.dy;
        let lambda = 1.0 / s + if observed { 1.0 / model.r } else { 0.0 };
        let prec = phi[i] * lambda;
        let mut num = m[i] * (1.0 / s);
        if observed {
            num = num + phi[i] * (y[i] / model.r);
        }
        mean.push(num / prec);
        precision.push(prec);
    }
    GaussProposal { mean, precision }
}

/// Reparameterized proposal draw from standard normal `noise`.
pub fn proposal_sample<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    x_prev: Option<&[S]>,
    y: &[f64],
    noise: &[f64],
) -> Result<Vec<S>, SsmError> {
    model.check_theta(theta)?;
    proposal.validate(model)?;
    check_len("noise", model.dx, noise.len())?;
    check_len("y", model.dy, y.len())?;
    if let Some(xp) = x_prev {
        check_len("x_prev", model.dx, xp.len())?;
    }
    Ok(proposal_sample_unchecked(model, theta, proposal, x_prev, y, noise))
}

pub(crate) fn proposal_sample_unchecked<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    x_prev: Option<&[S]>,
    y: &[f64],
    noise: &[f64],
) -> Vec<S> {
    match proposal {
        Proposal::Bootstrap | Proposal::DetachedBootstrap => {
            let (mean, sd) = match x_prev {
                Some(xp) => {
                    if matches!(proposal, Proposal::DetachedBootstrap) {
                        let th: Vec<S> = theta.iter().map(|t| t.detach()).collect();
                        (model.transition_mean(&th, xp), model.q.sqrt())
                    } else {
                        (model.transition_mean(theta, xp), model.q.sqrt())
                    }
                }
                None => (vec![S::cst(0.0); model.dx], model.p0.sqrt()),
            };
            mean.iter().zip(noise).map(|(&m, &u)| m + sd * u).collect()
        }
        Proposal::Learned(phi) => {
            let g = learned_moments(model, theta, phi, x_prev, y);
            g.mean.iter().zip(&g.precision).zip(noise).map(|((&m, &p), &u)| m + S::cst(u) / p.sqrt()).collect()
        }
    }
}

/// `log q(x | x_prev, y)`.
pub fn proposal_logpdf<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    x_prev: Option<&[S]>,
    x: &[S],
    y: &[f64],
) -> Result<S, SsmError> {
    model.check_theta(theta)?;
    proposal.validate(model)?;
    check_len("x", model.dx, x.len())?;
    match proposal {
        Proposal::Bootstrap | Proposal::DetachedBootstrap => {
            let th: Vec<S> = if matches!(proposal, Proposal::DetachedBootstrap) {
                theta.iter().map(|t| t.detach()).collect()
            } else {
                theta.to_vec()
            };
            match x_prev {
                Some(xp) => model.transition_logpdf(&th, xp, x),
                None => model.prior_logpdf(x),
            }
        }
        Proposal::Learned(phi) => {
            check_len("y", model.dy, y.len())?;
            let g = learned_moments(model, theta, phi, x_prev, y);
            let mut terms = Vec::with_capacity(model.dx);
            for i in 0..model.dx {
                let d = x[i] - g.mean[i];
                terms.push((g.precision[i].ln() - g.precision[i] * d.square()) * 0.5 - 0.5 * LN_2PI);
            }
            Ok(S::sum(&terms))
        }
    }
}

/// `log f(x | x_prev) + log g(y | x) - log q(x | x_prev, y)`; the first
/// step (`x_prev = None`) uses the prior in place of the transition.
pub fn importance_log_weight<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    x_prev: Option<&[S]>,
    x: &[S],
    y: &[f64],
) -> Result<S, SsmError> {
    model.check_theta(theta)?;
    proposal.validate(model)?;
    check_len("x", model.dx, x.len())?;
    check_len("y", model.dy, y.len())?;
    if let Some(xp) = x_prev {
        check_len("x_prev", model.dx, xp.len())?;
    }
    Ok(importance_log_weight_unchecked(model, theta, proposal, x_prev, x, y))
}

pub(crate) fn importance_log_weight_unchecked<S: Real>(
    model: &LgModel,
    theta: &[S],
    proposal: &Proposal<S>,
    x_prev: Option<&[S]>,
    x: &[S],
    y: &[f64],
) -> S {
    let obs = model.observation_logpdf(x, y).expect("checked dimensions");
    if let Proposal::Bootstrap = proposal {
        return obs;
    }
    let dynamics = match x_prev {
        Some(xp) => model.transition_logpdf(theta, xp, x),
        None => model.prior_logpdf(x),
    }
    .expect("checked dimensions");
    let q = proposal_logpdf(model, theta, proposal, x_prev, x, y).expect("checked dimensions");
    dynamics + obs - q
}
