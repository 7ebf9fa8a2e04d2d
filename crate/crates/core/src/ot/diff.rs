//! Differentiable potentials.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{lse_value, Real};

use super::sinkhorn::{sinkhorn_log, SinkhornConfig, SinkhornResult};
use super::OtError;

/// How derivatives pass through the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornGradient {
    /// Implicit differentiation of the fixed point at the returned
    /// potentials. Exact at convergence, O((n+m)^3) in the backward pass.
    #[default]
    Implicit,
    /// Runs the solver off the tape, then records a single non-averaged
    /// update of each potential with the other one held constant.
    OneStep,
    /// Records every iteration. Memory grows with the iteration count; meant
    /// for validation on small problems.
    Unrolled,
}

#[derive(Debug, Clone)]
pub struct DiffPotentials<S> {
    pub f: Vec<S>,
    pub g: Vec<S>,
    pub result: SinkhornResult,
}

/// `T(lw, pot, C)_i = -eps * LSE_k(lw_k + (pot_k - C_ik) / eps)` over
/// `k in 0..len(lw)`; `cost(i, k)` indexes `C`.
pub(crate) fn t_op<S: Real>(lw: &[S], pot: &[S], rows: usize, cost: impl Fn(usize, usize) -> S, eps: f64) -> Vec<S> {
    let inv = 1.0 / eps;
    (0..rows)
        .map(|i| {
            let terms: Vec<S> = (0..lw.len()).map(|k| S::affine(&[lw[k], pot[k], cost(i, k)], &[1.0, inv, -inv], 0.0)).collect();
            S::log_sum_exp(&terms) * (-eps)
        })
        .collect()
}

fn values<S: Real>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(|x| x.value()).collect()
}

/// Row-stochastic matrix `softmax_k(lw_k + (pot_k - C_ik)/eps)`; `cost(i,k)`.
fn softmax_rows(lw: &[f64], pot: &[f64], rows: usize, cost: impl Fn(usize, usize) -> f64, eps: f64) -> Vec<f64> {
    let k = lw.len();
    let mut out = Vec::with_capacity(rows * k);
    for i in 0..rows {
        let z: Vec<f64> = (0..k).map(|j| lw[j] + (pot[j] - cost(i, j)) / eps).collect();
        let l = lse_value(z.iter().copied());
        out.extend(z.iter().map(|v| (v - l).exp()));
    }
    out
}

/// Adjoint of the fixed point `f = T(lb, g, C)`, `g = T(la, f, C^T)`.
///
/// Given output adjoints `(fbar, gbar)`, returns adjoints for
/// `(la, lb, C)`. The fixed-point Jacobian `[[I, Pi], [Pi', I]]` is singular
/// along the shift `(1, -1)`; the system is solved with its last equation
/// dropped and the last unknown pinned to zero, which is exact for
/// shift-invariant consumers (plans, objectives).
pub(crate) struct FixedPointAdjoint {
    n: usize,
    m: usize,
    eps: f64,
    /// `Pi_ik = P_ik / a_i`, `n x m`.
    pi: Vec<f64>,
    /// `Pi'_jk = P_kj / b_j`, `m x n`.
    pi_t: Vec<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl FixedPointAdjoint {
    pub(crate) fn new(la: &[f64], lb: &[f64], c: &[f64], f: &[f64], g: &[f64], eps: f64) -> Self {
        let (n, m) = (la.len(), lb.len());
        let pi = softmax_rows(lb, g, n, |i, k| c[i * m + k], eps);
        let pi_t = softmax_rows(la, f, m, |j, k| c[k * m + j], eps);
        let size = n + m - 1;
        let lu = (size > 0).then(|| {
            // transpose of [[I, Pi], [Pi', I]] restricted to the leading block
            let mut mat = DMatrix::<f64>::identity(size, size);
            for i in 0..n {
                for k in 0..m {
                    // J[i, n+k] = Pi_ik  ->  J^T[n+k, i]
                    if n + k < size {
                        mat[(n + k, i)] = pi[i * m + k];
                    }
                }
            }
            for j in 0..m {
                for k in 0..n {
                    // J[n+j, k] = Pi'_jk  ->  J^T[k, n+j]
                    if n + j < size {
                        mat[(k, n + j)] = pi_t[j * n + k];
                    }
                }
            }
            mat.lu()
        });
        FixedPointAdjoint { n, m, eps, pi, pi_t, lu }
    }

    /// Accumulates into `la_bar` (n), `lb_bar` (m), `c_bar` (n*m).
    pub(crate) fn backprop(&self, fbar: &[f64], gbar: &[f64], la_bar: &mut [f64], lb_bar: &mut [f64], c_bar: &mut [f64]) {
        let (n, m, eps) = (self.n, self.m, self.eps);
        let size = n + m - 1;
        let mut lam = vec![0.0; n + m];
        if let Some(lu) = &self.lu {
            let rhs = DVector::from_iterator(size, fbar.iter().chain(gbar).copied().take(size));
            if let Some(sol) = lu.solve(&rhs) {
                lam[..size].copy_from_slice(sol.as_slice());
            }
        }
        let (lf, lg) = lam.split_at(n);
        for i in 0..n {
            for k in 0..m {
                let p = self.pi[i * m + k];
                lb_bar[k] -= eps * lf[i] * p;
                c_bar[i * m + k] += lf[i] * p;
            }
        }
        for j in 0..m {
            for k in 0..n {
                let p = self.pi_t[j * n + k];
                la_bar[k] -= eps * lg[j] * p;
                c_bar[k * m + j] += lg[j] * p;
            }
        }
    }
}

/// Potentials for log-marginals `la`, `lb` and row-major cost `c`, with
/// derivatives according to `mode`. For plain `f64` all modes coincide.
pub fn sinkhorn_potentials_diff<S: Real>(
    la: &[S],
    lb: &[S],
    c: &[S],
    cfg: &SinkhornConfig,
    mode: SinkhornGradient,
) -> Result<DiffPotentials<S>, OtError> {
    let (n, m) = (la.len(), lb.len());
    let (lav, lbv, cv) = (values(la), values(lb), values(c));
    let eps = cfg.epsilon;
    if !S::TRACKED {
        let result = sinkhorn_log(&lav, &lbv, &cv, cfg)?;
        let f = result.f.iter().map(|&v| S::cst(v)).collect();
        let g = result.g.iter().map(|&v| S::cst(v)).collect();
        return Ok(DiffPotentials { f, g, result });
    }
    match mode {
        SinkhornGradient::Implicit => {
            let result = sinkhorn_log(&lav, &lbv, &cv, cfg)?;
            let inputs: Vec<S> = la.iter().chain(lb).chain(c).copied().collect();
            let outputs: Vec<f64> = result.f.iter().chain(&result.g).copied().collect();
            let (f, g) = (result.f.clone(), result.g.clone());
            let out = S::custom(&inputs, &outputs, move || {
                let adj = FixedPointAdjoint::new(&lav, &lbv, &cv, &f, &g, eps);
                Box::new(move |out_bar: &[f64], in_bar: &mut [f64]| {
                    let (fbar, gbar) = out_bar.split_at(n);
                    let (la_bar, rest) = in_bar.split_at_mut(n);
                    let (lb_bar, c_bar) = rest.split_at_mut(m);
                    adj.backprop(fbar, gbar, la_bar, lb_bar, c_bar);
                })
            });
            let (f, g) = out.split_at(n);
            Ok(DiffPotentials { f: f.to_vec(), g: g.to_vec(), result })
        }
        SinkhornGradient::OneStep => {
            let result = sinkhorn_log(&lav, &lbv, &cv, cfg)?;
            let f_star: Vec<S> = result.f.iter().map(|&v| S::cst(v)).collect();
            let g_star: Vec<S> = result.g.iter().map(|&v| S::cst(v)).collect();
            let f = t_op(lb, &g_star, n, |i, k| c[i * m + k], eps);
            let g = t_op(la, &f_star, m, |j, k| c[k * m + j], eps);
            Ok(DiffPotentials { f, g, result })
        }
        SinkhornGradient::Unrolled => {
            let mut f: Vec<S> = vec![S::cst(0.0); n];
            let mut g: Vec<S> = vec![S::cst(0.0); m];
            let mut residual = f64::INFINITY;
            let mut iterations = 0;
            while iterations < cfg.max_iter {
                let tf = t_op(lb, &g, n, |i, k| c[i * m + k], eps);
                let tg = t_op(la, &f, m, |j, k| c[k * m + j], eps);
                residual = f
                    .iter()
                    .zip(&tf)
                    .chain(g.iter().zip(&tg))
                    .map(|(p, t)| (p.value() - t.value()).abs())
                    .fold(0.0, f64::max);
                if !residual.is_finite() {
                    return Err(OtError::NonFinite { iterations });
                }
                if residual <= cfg.tol {
                    break;
                }
                iterations += 1;
                f = f.iter().zip(&tf).map(|(&p, &t)| (p + t) * 0.5).collect();
                g = g.iter().zip(&tg).map(|(&p, &t)| (p + t) * 0.5).collect();
            }
            let result = SinkhornResult {
                f: values(&f),
                g: values(&g),
                epsilon: eps,
                iterations,
                converged: residual <= cfg.tol,
                residual,
            };
            Ok(DiffPotentials { f, g, result })
        }
    }
}
