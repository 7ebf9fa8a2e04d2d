use crate::autodiff::lse_value;

use super::{CostMatrix, OtError};

/// Marginal entries are floored at this value before taking logs.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Default tolerance on plan marginals.
pub const TOL_MARGINAL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// Stop once the largest potential update falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig { epsilon: 0.5, tol: 1e-8, max_iter: 500 }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SinkhornConfig { epsilon, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest potential update at the last iteration.
    pub residual: f64,
}

/// Floors a probability vector at [`WEIGHT_FLOOR`], renormalizes it and
/// returns its logarithm.
pub fn log_marginal(w: &[f64]) -> Result<Vec<f64>, OtError> {
    if w.is_empty() {
        return Err(OtError::Empty);
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(OtError::BadMarginal("weights"));
    }
    let l: Vec<f64> = w.iter().map(|&v| v.max(WEIGHT_FLOOR).ln()).collect();
    let z = lse_value(l.iter().copied());
    Ok(l.iter().map(|v| v - z).collect())
}

fn check_inputs(la: &[f64], lb: &[f64], c: &[f64], epsilon: f64) -> Result<(), OtError> {
    if la.is_empty() || lb.is_empty() {
        return Err(OtError::Empty);
    }
    if c.len() != la.len() * lb.len() {
        return Err(OtError::Shape(format!("cost has {} entries, expected {}x{}", c.len(), la.len(), lb.len())));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(OtError::BadEpsilon(epsilon));
    }
    Ok(())
}

/// Solves for the potentials given marginals `a`, `b` and cost `C`.
pub fn sinkhorn_potentials(a: &[f64], b: &[f64], c: &CostMatrix, cfg: &SinkhornConfig) -> Result<SinkhornResult, OtError> {
    if a.len() != c.rows || b.len() != c.cols {
        return Err(OtError::Shape(format!("marginals {}x{} vs cost {}x{}", a.len(), b.len(), c.rows, c.cols)));
    }
    sinkhorn_log(&log_marginal(a)?, &log_marginal(b)?, &c.data, cfg)
}

/// Row operator `T(lb, g, C)_i = -eps * LSE_k(lb_k + (g_k - C_ik) / eps)`
/// evaluated against a precomputed kernel `K = exp(-C / eps)`. Rows whose
/// kernel sum underflows are recomputed with a full log-sum-exp.
struct Kernel {
    n: usize,
    m: usize,
    eps: f64,
    c: Vec<f64>,
    ct: Vec<f64>,
    k: Vec<f64>,
    kt: Vec<f64>,
}

impl Kernel {
    fn new(c: &[f64], n: usize, m: usize, eps: f64) -> Self {
        let mut ct = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                ct[j * n + i] = c[i * m + j];
            }
        }
        let k = c.iter().map(|v| (-v / eps).exp()).collect();
        let kt = ct.iter().map(|v| (-v / eps).exp()).collect();
        Kernel { n, m, eps, c: c.to_vec(), ct, k, kt }
    }

    /// Applies the operator along rows (`transposed = false`, output length
    /// `n`, summing over `m`) or columns.
    fn apply(&self, log_w: &[f64], pot: &[f64], transposed: bool, out: &mut [f64], scratch: &mut Vec<f64>) {
        let (rows, cols, k, c) = if transposed { (self.m, self.n, &self.kt, &self.ct) } else { (self.n, self.m, &self.k, &self.c) };
        let inv = 1.0 / self.eps;
        scratch.clear();
        scratch.extend(log_w.iter().zip(pot).map(|(l, p)| l + p * inv));
        let shift = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scratch.iter().map(|s| (s - shift).exp()).collect();
        for i in 0..rows {
            let krow = &k[i * cols..(i + 1) * cols];
            let sum = dot4(krow, &e);
            out[i] = if sum > 1e-200 && sum.is_finite() {
                -self.eps * (shift + sum.ln())
            } else {
                let crow = &c[i * cols..(i + 1) * cols];
                -self.eps * lse_value(scratch.iter().zip(crow).map(|(s, cc)| s - cc * inv))
            };
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results stay deterministic.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Log-domain solver. `la`, `lb` are log-marginals, `c` is row-major
/// `len(la) x len(lb)`.
///
/// Both potentials are updated from the previous iterate:
/// `f <- (f + T(lb, g, C)) / 2`, `g <- (g + T(la, f, C^T)) / 2`, starting
/// from zero. When the largest change `max|T - pot|` is within `tol` the
/// current potentials are returned unchanged.
pub fn sinkhorn_log(la: &[f64], lb: &[f64], c: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornResult, OtError> {
    check_inputs(la, lb, c, cfg.epsilon)?;
    let (n, m) = (la.len(), lb.len());
    let kernel = Kernel::new(c, n, m, cfg.epsilon);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut tf = vec![0.0; n];
    let mut tg = vec![0.0; m];
    let mut scratch = Vec::with_capacity(n.max(m));
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        kernel.apply(lb, &g, false, &mut tf, &mut scratch);
        kernel.apply(la, &f, true, &mut tg, &mut scratch);
        residual = f.iter().zip(&tf).chain(g.iter().zip(&tg)).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(OtError::NonFinite { iterations });
        }
        if residual <= cfg.tol {
            break;
        }
        iterations += 1;
        for (p, t) in f.iter_mut().zip(&tf) {
            *p = 0.5 * (*p + t);
        }
        for (p, t) in g.iter_mut().zip(&tg) {
            *p = 0.5 * (*p + t);
        }
    }
    Ok(SinkhornResult { f, g, epsilon: cfg.epsilon, iterations, converged: residual <= cfg.tol, residual })
}

/// Same iteration as [`sinkhorn_log`] with every operator evaluated by a
/// full log-sum-exp. Slower; kept as a cross-check of the kernel path.
pub fn sinkhorn_reference(la: &[f64], lb: &[f64], c: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornResult, OtError> {
    check_inputs(la, lb, c, cfg.epsilon)?;
    let (n, m) = (la.len(), lb.len());
    let eps = cfg.epsilon;
    let t_row = |lw: &[f64], pot: &[f64], i: usize| -eps * lse_value((0..m).map(|k| lw[k] + (pot[k] - c[i * m + k]) / eps));
    let t_col = |lw: &[f64], pot: &[f64], j: usize| -eps * lse_value((0..n).map(|k| lw[k] + (pot[k] - c[k * m + j]) / eps));
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let tf: Vec<f64> = (0..n).map(|i| t_row(lb, &g, i)).collect();
        let tg: Vec<f64> = (0..m).map(|j| t_col(la, &f, j)).collect();
        residual = f.iter().zip(&tf).chain(g.iter().zip(&tg)).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(OtError::NonFinite { iterations });
        }
        if residual <= cfg.tol {
            break;
        }
        iterations += 1;
        f = f.iter().zip(&tf).map(|(p, t)| 0.5 * (p + t)).collect();
        g = g.iter().zip(&tg).map(|(p, t)| 0.5 * (p + t)).collect();
    }
    Ok(SinkhornResult { f, g, epsilon: eps, iterations, converged: residual <= cfg.tol, residual })
}

/// Exact column update `g = T(la, f, C^T)`; makes the column marginals of
/// the plan match `b` to rounding.
pub(crate) fn column_update(la: &[f64], f: &[f64], c: &[f64], m: usize, eps: f64) -> Vec<f64> {
    let n = la.len();
    (0..m).map(|j| -eps * lse_value((0..n).map(|k| la[k] + (f[k] - c[k * m + j]) / eps))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Row-major coupling.
    pub p: Vec<f64>,
    pub row_residual: f64,
    pub col_residual: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.cols + j]
    }
    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }
    /// `sum_ij P_ij C_ij`.
    pub fn transport_cost(&self, c: &[f64]) -> f64 {
        self.p.iter().zip(c).map(|(p, c)| p * c).sum()
    }
}

/// Builds the plan without checking marginals.
pub fn transport_plan_unchecked(la: &[f64], lb: &[f64], c: &[f64], f: &[f64], g: &[f64], eps: f64) -> TransportPlan {
    let (n, m) = (la.len(), lb.len());
    let mut p = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            p.push((la[i] + lb[j] + (f[i] + g[j] - c[i * m + j]) / eps).exp());
        }
    }
    let mut row_residual: f64 = 0.0;
    for i in 0..n {
        let s: f64 = p[i * m..(i + 1) * m].iter().sum();
        row_residual = row_residual.max((s - la[i].exp()).abs());
    }
    let mut col_residual: f64 = 0.0;
    for j in 0..m {
        let s: f64 = (0..n).map(|i| p[i * m + j]).sum();
        col_residual = col_residual.max((s - lb[j].exp()).abs());
    }
    TransportPlan { rows: n, cols: m, p, row_residual, col_residual }
}

/// Recovers the plan from converged potentials; fails when a marginal is
/// off by more than `10 * TOL_MARGINAL`.
pub fn transport_plan(a: &[f64], b: &[f64], c: &CostMatrix, result: &SinkhornResult) -> Result<TransportPlan, OtError> {
    let (la, lb) = (log_marginal(a)?, log_marginal(b)?);
    if result.f.len() != la.len() || result.g.len() != lb.len() || c.data.len() != la.len() * lb.len() {
        return Err(OtError::Shape("potentials do not match the cost".into()));
    }
    let plan = transport_plan_unchecked(&la, &lb, &c.data, &result.f, &result.g, result.epsilon);
    let limit = 10.0 * TOL_MARGINAL;
    if plan.max_residual() > limit {
        return Err(OtError::MarginalResidual { residual: plan.max_residual(), limit });
    }
    Ok(plan)
}

/// Regularized dual `a.f + b.g - eps * a^T M b` with
/// `M_ij = exp((f_i + g_j - C_ij)/eps) - 1`; the exponential sum is taken in
/// log-domain.
pub fn dual_objective(a: &[f64], b: &[f64], c: &[f64], f: &[f64], g: &[f64], eps: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    let lin: f64 = a.iter().zip(f).map(|(x, y)| x * y).sum::<f64>() + b.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
    let terms = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).filter(|&(i, j)| a[i] > 0.0 && b[j] > 0.0).map(|(i, j)| {
        a[i].ln() + b[j].ln() + (f[i] + g[j] - c[i * m + j]) / eps
    });
    let mass = lse_value(terms).exp();
    let total: f64 = a.iter().sum::<f64>() * b.iter().sum::<f64>();
    lin - eps * (mass - total)
}

/// Primal `sum_ij P_ij (C_ij + eps log(P_ij / (a_i b_j)))`, with `0 log 0 = 0`.
pub fn reg_primal_cost(p: &[f64], c: &[f64], a: &[f64], b: &[f64], eps: f64) -> f64 {
    let m = b.len();
    p.iter()
        .enumerate()
        .map(|(idx, &pij)| {
            if pij <= 0.0 {
                return 0.0;
            }
            let (i, j) = (idx / m, idx % m);
            pij * (c[idx] + eps * (pij / (a[i] * b[j])).ln())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn tight() -> SinkhornConfig {
        SinkhornConfig { epsilon: 1.0, tol: 1e-13, max_iter: 10_000 }
    }

    fn random_instance(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, CostMatrix) {
        let k = StreamKey::new(11, seed);
        let u = k.uniforms(0, Purpose::Test, 2 * n + 4 * n);
        let a: Vec<f64> = u[..n].iter().map(|v| v + 0.05).collect();
        let b: Vec<f64> = u[n..2 * n].iter().map(|v| v + 0.05).collect();
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let pts = &u[2 * n..];
        let c = super::super::cost_matrix(&pts[..2 * n], &pts[2 * n..], 2, false).unwrap();
        (a.iter().map(|v| v / sa).collect(), b.iter().map(|v| v / sb).collect(), c)
    }

    #[test]
    fn single_atom() {
        let c = CostMatrix::from_rows(1, 1, vec![0.0]);
        let r = sinkhorn_potentials(&[1.0], &[1.0], &c, &SinkhornConfig::default()).unwrap();
        assert_eq!(r.f, vec![0.0]);
        assert_eq!(r.g, vec![0.0]);
        assert!(r.converged);
        let p = transport_plan(&[1.0], &[1.0], &c, &r).unwrap();
        assert_eq!(p.p, vec![1.0]);
    }

    #[test]
    fn symmetric_two_point_closed_form() {
        let c = CostMatrix::from_rows(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let r = sinkhorn_potentials(&uniform(2), &uniform(2), &c, &tight()).unwrap();
        let p = transport_plan(&uniform(2), &uniform(2), &c, &r).unwrap();
        let diag = 0.5 / (1.0 + (-1.0f64).exp());
        assert!((p.get(0, 0) - diag).abs() < 1e-12 && (p.get(1, 1) - diag).abs() < 1e-12);
        assert!((p.get(0, 1) - (0.5 - diag)).abs() < 1e-12);
        assert!((diag - 0.365_529_7).abs() < 1e-6);
        assert!(p.max_residual() <= 1e-8);
        // e^{2c} = 2 / (1 + e^{-1}) with f = g = c
        let cc = 0.5 * (2.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((r.f[0] - cc).abs() < 1e-12 && (r.g[1] - cc).abs() < 1e-12);
        let dual = dual_objective(&uniform(2), &uniform(2), &c.data, &r.f, &r.g, 1.0);
        let primal = reg_primal_cost(&p.p, &c.data, &uniform(2), &uniform(2), 1.0);
        assert!((dual - primal).abs() < 1e-8);
    }

    #[test]
    fn large_epsilon_gives_independent_coupling() {
        let (a, b, c) = random_instance(1, 5);
        let cfg = SinkhornConfig { epsilon: 1e3, ..SinkhornConfig::default() };
        let r = sinkhorn_potentials(&a, &b, &c, &cfg).unwrap();
        let p = transport_plan(&a, &b, &c, &r).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((p.get(i, j) - a[i] * b[j]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn random_instances_satisfy_marginals_and_duality() {
        for seed in 0..10 {
            let (a, b, c) = random_instance(seed, 8);
            let cfg = SinkhornConfig { epsilon: 0.5, ..SinkhornConfig::default() };
            let r = sinkhorn_potentials(&a, &b, &c, &cfg).unwrap();
            assert!(r.converged);
            let p = transport_plan(&a, &b, &c, &r).unwrap();
            assert!(p.max_residual() <= 1e-6);
            assert!(p.p.iter().all(|&v| v > 0.0));
            let dual = dual_objective(&a, &b, &c.data, &r.f, &r.g, 0.5);
            let primal = reg_primal_cost(&p.p, &c.data, &a, &b, 0.5);
            assert!((dual - primal).abs() <= 1e-6, "{dual} {primal}");
        }
    }

    #[test]
    fn kernel_path_matches_reference() {
        for (seed, eps) in [(0, 0.5), (1, 0.05), (2, 0.01), (3, 2.0)] {
            let (a, b, c) = random_instance(seed, 7);
            let (la, lb) = (log_marginal(&a).unwrap(), log_marginal(&b).unwrap());
            let cfg = SinkhornConfig { epsilon: eps, tol: 1e-10, max_iter: 5000 };
            let fast = sinkhorn_log(&la, &lb, &c.data, &cfg).unwrap();
            let slow = sinkhorn_reference(&la, &lb, &c.data, &cfg).unwrap();
            assert_eq!(fast.iterations, slow.iterations);
            for (x, y) in fast.f.iter().chain(&fast.g).zip(slow.f.iter().chain(&slow.g)) {
                assert!((x - y).abs() < 1e-10, "eps={eps}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn dual_is_zero_at_origin() {
        let c = vec![0.0; 9];
        assert_eq!(dual_objective(&uniform(3), &uniform(3), &c, &[0.0; 3], &[0.0; 3], 0.7), 0.0);
    }

    #[test]
    fn dual_is_stationary_at_the_solution() {
        let (a, b, c) = random_instance(4, 6);
        let cfg = SinkhornConfig { epsilon: 0.3, tol: 1e-13, max_iter: 20_000 };
        let r = sinkhorn_potentials(&a, &b, &c, &cfg).unwrap();
        let base = dual_objective(&a, &b, &c.data, &r.f, &r.g, 0.3);
        let d = 1e-4;
        for i in 0..6 {
            let mut f = r.f.clone();
            f[i] += d;
            let moved = dual_objective(&a, &b, &c.data, &f, &r.g, 0.3);
            assert!(moved <= base + 1e-12);
            assert!((moved - base).abs() < 10.0 * d * d);
        }
    }

    #[test]
    fn product_plan_has_zero_entropy_term() {
        let (a, b, c) = random_instance(5, 4);
        let p: Vec<f64> = (0..16).map(|k| a[k / 4] * b[k % 4]).collect();
        let expected: f64 = (0..16).map(|k| p[k] * c.data[k]).sum();
        assert!((reg_primal_cost(&p, &c.data, &a, &b, 0.8) - expected).abs() < 1e-14);
    }

    #[test]
    fn sinkhorn_plan_beats_other_couplings() {
        let (a, b, c) = random_instance(6, 5);
        let eps = 0.4;
        let cfg = SinkhornConfig { epsilon: eps, tol: 1e-12, max_iter: 10_000 };
        let best = reg_primal_cost(&transport_plan(&a, &b, &c, &sinkhorn_potentials(&a, &b, &c, &cfg).unwrap()).unwrap().p, &c.data, &a, &b, eps);
        // other feasible couplings: Sinkhorn scaling of random kernels
        for seed in 0..20 {
            let u = StreamKey::new(12, seed).uniforms(0, Purpose::Test, 25);
            let fake = CostMatrix::from_rows(5, 5, u.iter().map(|v| 3.0 * v).collect());
            let r = sinkhorn_potentials(&a, &b, &fake, &SinkhornConfig { epsilon: 1.0, tol: 1e-13, max_iter: 10_000 }).unwrap();
            let p = transport_plan(&a, &b, &fake, &r).unwrap();
            assert!(reg_primal_cost(&p.p, &c.data, &a, &b, eps) >= best - 1e-10);
        }
    }

    #[test]
    fn residual_error_is_reported() {
        let (a, b, c) = random_instance(7, 4);
        let cfg = SinkhornConfig { epsilon: 0.01, tol: 1e-8, max_iter: 1 };
        let r = sinkhorn_potentials(&a, &b, &c, &cfg).unwrap();
        assert!(!r.converged);
        assert!(matches!(transport_plan(&a, &b, &c, &r), Err(OtError::MarginalResidual { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = CostMatrix::from_rows(1, 1, vec![0.0]);
        assert!(matches!(sinkhorn_potentials(&[1.0], &[1.0], &c, &SinkhornConfig::with_epsilon(0.0)), Err(OtError::BadEpsilon(_))));
        assert!(matches!(sinkhorn_potentials(&[f64::NAN], &[1.0], &c, &SinkhornConfig::default()), Err(OtError::BadMarginal(_))));
    }
}
