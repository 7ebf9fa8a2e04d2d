//! Resampling schemes: multinomial, systematic, soft, exact ensemble
//! transform and its entropy-regularized (differentiable) version.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{lse_value, Real, Vjp};
use crate::ot::{
    column_update, cost_matrix_real, cost_scale, exact_ot_lp, sinkhorn_log, sinkhorn_potentials_diff, t_op, FixedPointAdjoint, OtError,
    SinkhornConfig, SinkhornGradient, LP_MAX_ATOMS, WEIGHT_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResampleError {
    #[error("ensemble needs at least one particle")]
    Empty,
    #[error("ensemble shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite particle position at index {0}")]
    NonFinitePosition(usize),
    #[error("all log-weights are -inf or non-finite")]
    DegenerateWeights,
    #[error("soft-resampling mixture must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("transport solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("exact transform supports at most {max} particles, got {found}")]
    TooLarge { max: usize, found: usize },
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Weighted particles. Log-weights are kept normalized.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble<S> {
    pub dim: usize,
    /// Row-major `N x dim`.
    pub positions: Vec<S>,
    /// Normalized log-weights.
    pub log_weights: Vec<S>,
    /// `exp(log_weights)` as plain values.
    pub weights: Vec<f64>,
}

impl<S: Real> ParticleEnsemble<S> {
    /// Builds an ensemble and normalizes `log_weights` by log-sum-exp.
    pub fn new(positions: Vec<S>, dim: usize, log_weights: Vec<S>) -> Result<Self, ResampleError> {
        let n = log_weights.len();
        if n == 0 {
            return Err(ResampleError::Empty);
        }
        if dim == 0 || positions.len() != n * dim {
            return Err(ResampleError::Shape(format!("{} positions for {} particles of dimension {}", positions.len(), n, dim)));
        }
        if let Some(i) = positions.iter().position(|x| !x.value().is_finite()) {
            return Err(ResampleError::NonFinitePosition(i / dim));
        }
        let z = S::log_sum_exp(&log_weights);
        if !z.value().is_finite() {
            return Err(ResampleError::DegenerateWeights);
        }
        let log_weights: Vec<S> = log_weights.iter().map(|&l| l - z).collect();
        let weights = log_weights.iter().map(|l| l.value().exp()).collect();
        Ok(ParticleEnsemble { dim, positions, log_weights, weights })
    }

    /// Equally weighted ensemble.
    pub fn uniform(positions: Vec<S>, dim: usize) -> Result<Self, ResampleError> {
        let n = if dim == 0 { 0 } else { positions.len() / dim };
        Self::new(positions, dim, vec![S::cst(0.0); n])
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn position(&self, i: usize) -> &[S] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights)
    }

    /// Weighted mean `sum_i w_i X_i` of the plain values.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += w * self.positions[i * self.dim + k].value();
            }
        }
        m
    }

    pub fn position_values(&self) -> Vec<f64> {
        self.positions.iter().map(|x| x.value()).collect()
    }

    fn gather(&self, ancestors: &[usize]) -> Vec<S> {
        ancestors.iter().flat_map(|&a| self.position(a).iter().copied()).collect()
    }
}

/// Effective sample size `1 / sum w_i^2` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Result of a resampling step.
#[derive(Debug, Clone)]
pub struct Resampled<S> {
    pub ensemble: ParticleEnsemble<S>,
    /// Selected indices for index-based schemes.
    pub ancestors: Option<Vec<usize>>,
    /// Solver iterations for transport-based schemes.
    pub iterations: usize,
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Index of the first cumulative entry above `u * total`.
fn invert_cdf(cum: &[f64], u: f64) -> usize {
    let target = u * cum[cum.len() - 1];
    cum.partition_point(|&c| c <= target).min(cum.len() - 1)
}

fn uniform_output<S: Real>(ens: &ParticleEnsemble<S>, ancestors: Vec<usize>) -> Result<Resampled<S>, ResampleError> {
    let ensemble = ParticleEnsemble::uniform(ens.gather(&ancestors), ens.dim)?;
    Ok(Resampled { ensemble, ancestors: Some(ancestors), iterations: 0 })
}

/// N independent categorical draws by inverse CDF. Indices carry no
/// derivative; the selected positions keep theirs.
pub fn multinomial_resample<S: Real, R: Rng>(ens: &ParticleEnsemble<S>, rng: &mut R) -> Result<Resampled<S>, ResampleError> {
    let cum = cumulative(&ens.weights);
    let ancestors = (0..ens.len()).map(|_| invert_cdf(&cum, rng.gen::<f64>())).collect();
    uniform_output(ens, ancestors)
}

/// Single offset `u ~ U[0, 1/N)` and the grid `u + i/N`.
pub fn systematic_resample<S: Real, R: Rng>(ens: &ParticleEnsemble<S>, rng: &mut R) -> Result<Resampled<S>, ResampleError> {
    let n = ens.len();
    let cum = cumulative(&ens.weights);
    let u0 = rng.gen::<f64>() / n as f64;
    let ancestors = (0..n).map(|i| invert_cdf(&cum, u0 + i as f64 / n as f64)).collect();
    uniform_output(ens, ancestors)
}

/// Draws from the mixture `q = alpha w + (1 - alpha)/N` and reweights by
/// `w_A / q_A`. The draw is not differentiated; the correction is.
pub fn soft_resample<S: Real, R: Rng>(ens: &ParticleEnsemble<S>, alpha: f64, rng: &mut R) -> Result<Resampled<S>, ResampleError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ResampleError::BadAlpha(alpha));
    }
    let n = ens.len();
    let q: Vec<f64> = ens.weights.iter().map(|w| alpha * w + (1.0 - alpha) / n as f64).collect();
    let cum = cumulative(&q);
    let ancestors: Vec<usize> = (0..n).map(|_| invert_cdf(&cum, rng.gen::<f64>())).collect();
    let log_weights = ancestors
        .iter()
        .map(|&a| {
            let lw = ens.log_weights[a];
            lw - (lw.exp() * alpha + (1.0 - alpha) / n as f64).ln()
        })
        .collect();
    let ensemble = ParticleEnsemble::new(ens.gather(&ancestors), ens.dim, log_weights)?;
    Ok(Resampled { ensemble, ancestors: Some(ancestors), iterations: 0 })
}

/// Barycentric map `X~_i = N sum_k P_ik X_k` for a plan with uniform rows.
fn barycentric(p: &[f64], x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        for k in 0..n {
            let w = n as f64 * p[i * n + k];
            for d in 0..dim {
                out[i * dim + d] += w * x[k * dim + d];
            }
        }
    }
    out
}

/// Ensemble transform with the exact optimal plan between the uniform
/// measure and the weighted one on the same positions. Not differentiable;
/// outputs are constants.
pub fn exact_et_resample<S: Real>(ens: &ParticleEnsemble<S>) -> Result<Resampled<S>, ResampleError> {
    let n = ens.len();
    if n > LP_MAX_ATOMS {
        return Err(ResampleError::TooLarge { max: LP_MAX_ATOMS, found: n });
    }
    let x = ens.position_values();
    let (c, _) = cost_matrix_real(&x, &x, ens.dim, false)?;
    let a = vec![1.0 / n as f64; n];
    let sol = exact_ot_lp(&a, &ens.weights, &c)?;
    let out = barycentric(&sol.plan, &x, n, ens.dim);
    let ensemble = ParticleEnsemble::uniform(out.into_iter().map(S::cst).collect(), ens.dim)?;
    Ok(Resampled { ensemble, ancestors: None, iterations: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetConfig {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Divide costs by `delta(X)^2` so that epsilon is scale-free.
    pub normalize: bool,
    pub gradient: SinkhornGradient,
    /// Record the whole transform as one block with a hand-written adjoint
    /// instead of composing tape nodes. Only used with implicit gradients.
    pub fused: bool,
}

impl Default for DetConfig {
    fn default() -> Self {
        DetConfig { epsilon: 0.5, tol: 1e-8, max_iter: 20_000, normalize: true, gradient: SinkhornGradient::Implicit, fused: true }
    }
}

impl DetConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        DetConfig { epsilon, ..Self::default() }
    }

    fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig { epsilon: self.epsilon, tol: self.tol, max_iter: self.max_iter }
    }
}

/// Forward pass of the transform on plain values, with everything the
/// adjoint needs.
struct DetForward {
    n: usize,
    dim: usize,
    eps: f64,
    x: Vec<f64>,
    /// Raw squared distances.
    d: Vec<f64>,
    /// Normalized costs.
    c: Vec<f64>,
    /// Squared scale and the coordinate it came from, when normalized.
    scale: Option<(f64, usize)>,
    la: Vec<f64>,
    lb: Vec<f64>,
    /// Which log-weights were above the floor.
    unfloored: Vec<bool>,
    f: Vec<f64>,
    g: Vec<f64>,
    p: Vec<f64>,
    out: Vec<f64>,
    iterations: usize,
}

fn floor_log_weights(lw: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let floor = WEIGHT_FLOOR.ln();
    let unfloored: Vec<bool> = lw.iter().map(|&l| l > floor).collect();
    let l: Vec<f64> = lw.iter().map(|&l| l.max(floor)).collect();
    let z = lse_value(l.iter().copied());
    (l.iter().map(|v| v - z).collect(), unfloored)
}

fn det_forward(x: &[f64], lw: &[f64], dim: usize, cfg: &DetConfig) -> Result<DetForward, ResampleError> {
    let n = lw.len();
    let eps = cfg.epsilon;
    let (d, _) = cost_matrix_real(x, x, dim, false)?;
    let mut scale = None;
    if cfg.normalize {
        let (delta, k) = cost_scale(x, dim);
        let s = delta * delta;
        if s > 0.0 && (1.0 / s).is_finite() {
            scale = Some((s, k));
        }
    }
    let c: Vec<f64> = match scale {
        Some((s, _)) => {
            let inv = 1.0 / s;
            d.iter().map(|v| v * inv).collect()
        }
        None => d.clone(),
    };
    let (lb, unfloored) = floor_log_weights(lw);
    let la = vec![-(n as f64).ln(); n];
    let res = sinkhorn_log(&la, &lb, &c, &cfg.sinkhorn())?;
    if !res.converged {
        return Err(ResampleError::NotConverged { iterations: res.iterations, residual: res.residual });
    }
    let g = column_update(&la, &res.f, &c, n, eps);
    let mut p = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            p.push((la[i] + lb[j] + (res.f[i] + g[j] - c[i * n + j]) / eps).exp());
        }
    }
    let out = barycentric(&p, x, n, dim);
    Ok(DetForward { n, dim, eps, x: x.to_vec(), d, c, scale, la, lb, unfloored, f: res.f, g, p, out, iterations: res.iterations })
}

impl DetForward {
    /// Adjoint of the outputs with respect to positions (`n*dim`) and
    /// log-weights (`n`), accumulated into `in_bar`.
    fn backprop(&self, adj: &FixedPointAdjoint, out_bar: &[f64], in_bar: &mut [f64]) {
        let (n, dim, eps) = (self.n, self.dim, self.eps);
        let nf = n as f64;
        let (x_bar, lw_bar) = in_bar.split_at_mut(n * dim);
        // X~_i = N sum_j P_ij X_j
        let mut g_mat = vec![0.0; n * n];
        for i in 0..n {
            let ob = &out_bar[i * dim..(i + 1) * dim];
            for j in 0..n {
                let xj = &self.x[j * dim..(j + 1) * dim];
                let pbar = nf * ob.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>();
                g_mat[i * n + j] = pbar * self.p[i * n + j];
                let w = nf * self.p[i * n + j];
                for dd in 0..dim {
                    x_bar[j * dim + dd] += w * ob[dd];
                }
            }
        }
        // log P_ij = la_i + lb_j + (f_i + g_j - C_ij) / eps
        let mut f_bar = vec![0.0; n];
        let mut g_bar = vec![0.0; n];
        let mut lb_bar = vec![0.0; n];
        let mut c_bar = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let gij = g_mat[i * n + j];
                f_bar[i] += gij / eps;
                g_bar[j] += gij / eps;
                lb_bar[j] += gij;
                c_bar[i * n + j] -= gij / eps;
            }
        }
        // g = T(la, f, C^T): dg_j/df_k = -pi_jk, dg_j/dC_kj = pi_jk
        for j in 0..n {
            let z: Vec<f64> = (0..n).map(|k| self.la[k] + (self.f[k] - self.c[k * n + j]) / eps).collect();
            let l = lse_value(z.iter().copied());
            for k in 0..n {
                let pi = (z[k] - l).exp();
                f_bar[k] -= g_bar[j] * pi;
                c_bar[k * n + j] += g_bar[j] * pi;
            }
        }
        let mut la_bar = vec![0.0; n];
        adj.backprop(&f_bar, &vec![0.0; n], &mut la_bar, &mut lb_bar, &mut c_bar);
        // normalized cost C = D / s
        let mut d_bar = c_bar;
        if let Some((s, k)) = self.scale {
            let mut s_bar = 0.0;
            for (db, dv) in d_bar.iter_mut().zip(&self.d) {
                s_bar -= *db * dv / (s * s);
                *db /= s;
            }
            // s = dim * var_k, var_k = mean_i (x_ik - mu_k)^2
            let mu = (0..n).map(|i| self.x[i * dim + k]).sum::<f64>() / nf;
            for i in 0..n {
                x_bar[i * dim + k] += s_bar * dim as f64 * 2.0 * (self.x[i * dim + k] - mu) / nf;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let w = 2.0 * (d_bar[i * n + j] + d_bar[j * n + i]);
                if w == 0.0 || i == j {
                    continue;
                }
                for dd in 0..dim {
                    x_bar[i * dim + dd] += w * (self.x[i * dim + dd] - self.x[j * dim + dd]);
                }
            }
        }
        // lb = l' - LSE(l'), l' = max(lw, floor)
        let total: f64 = lb_bar.iter().sum();
        for m in 0..n {
            if self.unfloored[m] {
                lw_bar[m] += lb_bar[m] - self.lb[m].exp() * total;
            }
        }
    }
}

/// Differentiable ensemble transform: entropic plan between the uniform
/// measure on the particles (rows) and the weighted one (columns), then
/// `X~_i = N sum_k P_ik X_k`. Output weights are uniform.
pub fn det_resample<S: Real>(ens: &ParticleEnsemble<S>, cfg: &DetConfig) -> Result<Resampled<S>, ResampleError> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(OtError::BadEpsilon(cfg.epsilon).into());
    }
    let (n, dim) = (ens.len(), ens.dim);
    let x = ens.position_values();
    let lw: Vec<f64> = ens.log_weights.iter().map(|l| l.value()).collect();
    if !S::TRACKED || (cfg.fused && cfg.gradient == SinkhornGradient::Implicit) {
        let fwd = det_forward(&x, &lw, dim, cfg)?;
        let iterations = fwd.iterations;
        let out_values = fwd.out.clone();
        let positions = if S::TRACKED {
            let inputs: Vec<S> = ens.positions.iter().chain(&ens.log_weights).copied().collect();
            S::custom(&inputs, &out_values, move || -> Vjp {
                let adj = FixedPointAdjoint::new(&fwd.la, &fwd.lb, &fwd.c, &fwd.f, &fwd.g, fwd.eps);
                Box::new(move |out_bar: &[f64], in_bar: &mut [f64]| fwd.backprop(&adj, out_bar, in_bar))
            })
        } else {
            out_values.into_iter().map(S::cst).collect()
        };
        let ensemble = ParticleEnsemble::uniform(positions, dim)?;
        return Ok(Resampled { ensemble, ancestors: None, iterations });
    }
    det_composed(ens, cfg, n, dim)
}

/// Same map recorded node by node; the potentials enter through
/// [`sinkhorn_potentials_diff`] with the configured gradient mode.
fn det_composed<S: Real>(ens: &ParticleEnsemble<S>, cfg: &DetConfig, n: usize, dim: usize) -> Result<Resampled<S>, ResampleError> {
    let eps = cfg.epsilon;
    let floor = WEIGHT_FLOOR.ln();
    let lp: Vec<S> = ens.log_weights.iter().map(|&l| if l.value() > floor { l } else { S::cst(floor) }).collect();
    let z = S::log_sum_exp(&lp);
    let lb: Vec<S> = lp.iter().map(|&l| l - z).collect();
    let la = vec![S::cst(-(n as f64).ln()); n];
    let (c, _) = cost_matrix_real(&ens.positions, &ens.positions, dim, cfg.normalize)?;
    let pot = sinkhorn_potentials_diff(&la, &lb, &c, &cfg.sinkhorn(), cfg.gradient)?;
    if !pot.result.converged {
        return Err(ResampleError::NotConverged { iterations: pot.result.iterations, residual: pot.result.residual });
    }
    let g = t_op(&la, &pot.f, n, |j, k| c[k * n + j], eps);
    let inv = 1.0 / eps;
    let mut positions = Vec::with_capacity(n * dim);
    for i in 0..n {
        let row: Vec<S> = (0..n)
            .map(|j| S::affine(&[lb[j], pot.f[i], g[j], c[i * n + j]], &[1.0, inv, inv, -inv], la[i].value()).exp() * n as f64)
            .collect();
        for d in 0..dim {
            let col: Vec<S> = (0..n).map(|j| ens.positions[j * dim + d]).collect();
            positions.push(S::dot(&row, &col));
        }
    }
    let ensemble = ParticleEnsemble::uniform(positions, dim)?;
    Ok(Resampled { ensemble, ancestors: None, iterations: pot.result.iterations })
}

/// Resampler selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resampler {
    Multinomial,
    Systematic,
    Soft { alpha: f64 },
    Det(DetConfig),
    ExactEt,
}

impl Resampler {
    pub fn resample<S: Real, R: Rng>(&self, ens: &ParticleEnsemble<S>, rng: &mut R) -> Result<Resampled<S>, ResampleError> {
        match self {
            Resampler::Multinomial => multinomial_resample(ens, rng),
            Resampler::Systematic => systematic_resample(ens, rng),
            Resampler::Soft { alpha } => soft_resample(ens, *alpha, rng),
            Resampler::Det(cfg) => det_resample(ens, cfg),
            Resampler::ExactEt => exact_et_resample(ens),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Resampler::Multinomial => "multinomial",
            Resampler::Systematic => "systematic",
            Resampler::Soft { .. } => "soft",
            Resampler::Det(_) => "det",
            Resampler::ExactEt => "exact_et",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Recording, ScalarFn, Var};
    use crate::rng::{Purpose, StreamKey};

    fn ensemble(seed: u64, n: usize, dim: usize, spread: f64) -> ParticleEnsemble<f64> {
        let k = StreamKey::new(41, seed);
        let x = k.normals(0, Purpose::Test, n * dim);
        let lw: Vec<f64> = k.normals(1, Purpose::Test, n).iter().map(|v| spread * v).collect();
        ParticleEnsemble::new(x, dim, lw).unwrap()
    }

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        StreamKey::new(42, seed).stream(0, Purpose::Resampling)
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(ess(&[0.0, 1.0, 0.0]), 1.0);
        assert!((ess(&[0.75, 0.25]) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn one_hot_weights_select_one_particle() {
        let lw = vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        let ens = ParticleEnsemble::new(vec![1.0, 2.0, 3.0, 4.0], 1, lw).unwrap();
        for r in [multinomial_resample(&ens, &mut rng(0)).unwrap(), systematic_resample(&ens, &mut rng(1)).unwrap()] {
            assert_eq!(r.ensemble.positions, vec![3.0; 4]);
            assert_eq!(r.ancestors.unwrap(), vec![2; 4]);
        }
    }

    #[test]
    fn systematic_with_uniform_weights_keeps_everyone() {
        let ens = ensemble(0, 16, 1, 0.0);
        let r = systematic_resample(&ens, &mut rng(3)).unwrap();
        assert_eq!(r.ancestors.unwrap(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn resampling_is_seeded() {
        let ens = ensemble(1, 10, 2, 1.0);
        let a = multinomial_resample(&ens, &mut rng(5)).unwrap();
        let b = multinomial_resample(&ens, &mut rng(5)).unwrap();
        assert_eq!(a.ancestors, b.ancestors);
    }

    /// Checks E[mean psi(X~)] = sum w psi(X) within 3 standard errors.
    fn check_unbiased(scheme: impl Fn(&ParticleEnsemble<f64>, u64) -> ParticleEnsemble<f64>) {
        let ens = ensemble(2, 8, 1, 1.0);
        let reps = 10_000;
        for psi in [|x: f64| x, |x: f64| x * x] {
            let target: f64 = ens.weights.iter().zip(&ens.positions).map(|(w, x)| w * psi(*x)).sum();
            let draws: Vec<f64> = (0..reps)
                .map(|s| {
                    let out = scheme(&ens, s);
                    out.weights.iter().zip(&out.positions).map(|(w, x)| w * psi(*x)).sum()
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / reps as f64;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            assert!((mean - target).abs() <= 3.0 * sd / (reps as f64).sqrt() + 1e-12, "{mean} vs {target}");
        }
    }

    #[test]
    fn multinomial_is_unbiased() {
        check_unbiased(|e, s| multinomial_resample(e, &mut rng(s)).unwrap().ensemble);
    }

    #[test]
    fn systematic_is_unbiased() {
        check_unbiased(|e, s| systematic_resample(e, &mut rng(s)).unwrap().ensemble);
    }

    #[test]
    fn soft_is_unbiased() {
        check_unbiased(|e, s| soft_resample(e, 0.5, &mut rng(s)).unwrap().ensemble);
    }

    #[test]
    fn soft_limits() {
        let ens = ensemble(3, 6, 1, 1.0);
        let one = soft_resample(&ens, 1.0, &mut rng(7)).unwrap();
        let multi = multinomial_resample(&ens, &mut rng(7)).unwrap();
        assert_eq!(one.ancestors, multi.ancestors);
        for w in &one.ensemble.weights {
            assert!((w - 1.0 / 6.0).abs() < 1e-12);
        }
        let zero = soft_resample(&ens, 0.0, &mut rng(8)).unwrap();
        let anc = zero.ancestors.unwrap();
        let s: f64 = anc.iter().map(|&a| ens.weights[a]).sum();
        for (w, &a) in zero.ensemble.weights.iter().zip(&anc) {
            assert!((w - ens.weights[a] / s).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_weights_follow_definition() {
        let ens = ensemble(4, 7, 1, 1.5);
        let alpha = 0.1;
        let r = soft_resample(&ens, alpha, &mut rng(9)).unwrap();
        let anc = r.ancestors.unwrap();
        let raw: Vec<f64> = anc.iter().map(|&a| ens.weights[a] / (alpha * ens.weights[a] + (1.0 - alpha) / 7.0)).collect();
        let s: f64 = raw.iter().sum();
        assert!((r.ensemble.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (w, v) in r.ensemble.weights.iter().zip(&raw) {
            assert!((w - v / s).abs() <= 1e-12);
        }
        assert!(matches!(soft_resample(&ens, 1.5, &mut rng(0)), Err(ResampleError::BadAlpha(_))));
    }

    #[test]
    fn exact_et_examples() {
        let ens = ensemble(5, 6, 2, 0.0);
        let r = exact_et_resample(&ens).unwrap();
        for (a, b) in r.ensemble.positions.iter().zip(&ens.positions) {
            assert!((a - b).abs() < 1e-12);
        }
        let two = ParticleEnsemble::new(vec![0.0, 1.0], 1, vec![0.0, f64::NEG_INFINITY]).unwrap();
        let r = exact_et_resample(&two).unwrap();
        assert_eq!(r.ensemble.positions, vec![0.0, 0.0]);
        let ens = ensemble(6, 8, 2, 1.0);
        let r = exact_et_resample(&ens).unwrap();
        let (m_in, m_out) = (ens.mean(), r.ensemble.mean());
        for (a, b) in m_in.iter().zip(&m_out) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn det_on_a_single_point() {
        let x = vec![1.5, -2.0].repeat(5);
        let ens = ParticleEnsemble::new(x.clone(), 2, vec![0.3, -1.0, 2.0, 0.0, 0.1]).unwrap();
        for eps in [0.1, 1.0] {
            let r = det_resample(&ens, &DetConfig::with_epsilon(eps)).unwrap();
            for (a, b) in r.ensemble.positions.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn det_preserves_the_weighted_mean() {
        for seed in 0..10 {
            let ens = ensemble(seed, 20, 3, 2.0);
            let r = det_resample(&ens, &DetConfig::with_epsilon(0.25)).unwrap();
            for (a, b) in ens.mean().iter().zip(&r.ensemble.mean()) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn det_approaches_identity_for_uniform_weights() {
        let ens = ensemble(8, 6, 1, 0.0);
        let cfg = DetConfig { epsilon: 1e-3, max_iter: 1_000_000, ..DetConfig::default() };
        let r = det_resample(&ens, &cfg).unwrap();
        let x = &ens.positions;
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
        for (a, b) in r.ensemble.positions.iter().zip(x) {
            assert!((a - b).abs() <= 1e-2 * spread);
        }
    }

    struct DetPsi {
        n: usize,
        dim: usize,
        cfg: DetConfig,
    }

    impl ScalarFn for DetPsi {
        fn eval<S: Real>(&self, p: &[S]) -> S {
            let (x, lw) = p.split_at(self.n * self.dim);
            let ens = ParticleEnsemble::new(x.to_vec(), self.dim, lw.to_vec()).unwrap();
            let out = det_resample(&ens, &self.cfg).unwrap().ensemble;
            let terms: Vec<S> = out.positions.iter().enumerate().map(|(i, &v)| (v * (0.3 + 0.1 * i as f64)).exp()).collect();
            S::sum(&terms)
        }
    }

    fn det_point(seed: u64, n: usize, dim: usize) -> Vec<f64> {
        let ens = ensemble(seed, n, dim, 1.0);
        ens.positions.iter().copied().chain(ens.log_weights.iter().copied()).collect()
    }

    fn tight(gradient: SinkhornGradient, fused: bool) -> DetConfig {
        DetConfig { epsilon: 0.5, tol: 1e-14, max_iter: 200_000, normalize: true, gradient, fused }
    }

    #[test]
    fn det_gradient_matches_finite_differences() {
        for (seed, dim) in [(0, 1), (1, 2), (2, 3)] {
            let f = DetPsi { n: 6, dim, cfg: tight(SinkhornGradient::Implicit, true) };
            let r = finite_diff_check(&f, &det_point(seed, 6, dim), 1e-6).unwrap();
            assert!(r.max_rel_error <= 1e-5, "dim {dim}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn fused_and_composed_gradients_agree() {
        let p = det_point(3, 5, 2);
        let grad = |cfg: DetConfig| {
            let rec = Recording::new();
            let v = rec.declare_parameters(&p).unwrap();
            let out = DetPsi { n: 5, dim: 2, cfg }.eval::<Var>(&v);
            (out.value(), rec.grad(out).unwrap().into_vec())
        };
        let (v0, g0) = grad(tight(SinkhornGradient::Implicit, true));
        for cfg in [tight(SinkhornGradient::Implicit, false), tight(SinkhornGradient::Unrolled, false)] {
            let (v1, g1) = grad(cfg);
            assert!((v0 - v1).abs() < 1e-12);
            for (a, b) in g0.iter().zip(&g1) {
                assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0), "{cfg:?}: {g0:?} vs {g1:?}");
            }
        }
    }

    #[test]
    fn det_without_normalization_is_also_exact() {
        let cfg = DetConfig { normalize: false, ..tight(SinkhornGradient::Implicit, true) };
        let f = DetPsi { n: 5, dim: 2, cfg };
        let r = finite_diff_check(&f, &det_point(4, 5, 2), 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn det_reports_non_convergence() {
        let ens = ensemble(9, 10, 2, 3.0);
        let cfg = DetConfig { epsilon: 0.01, max_iter: 3, ..DetConfig::default() };
        assert!(matches!(det_resample(&ens, &cfg), Err(ResampleError::NotConverged { iterations: 3, .. })));
    }
}
