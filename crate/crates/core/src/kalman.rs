//! Exact filtering for [`LgModel`]: log-likelihood, filtered moments, a
//! finite-difference score and maximum-likelihood search.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ssm::{LgModel, Observations, SsmError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error(transparent)]
    Model(#[from] SsmError),
    #[error("innovation covariance is singular at step {0}")]
    SingularInnovation(usize),
    #[error("log-likelihood is not finite at theta={0:?}")]
    NonFinite(Vec<f64>),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("observation sequence is empty")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct KalmanOutput {
    pub loglik: f64,
    /// `log p(y_t | y_{1:t-1})`.
    pub increments: Vec<f64>,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
}

fn matrices(model: &LgModel, theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), KalmanError> {
    let f = DMatrix::from_row_slice(model.dx, model.dx, &model.transition_matrix(theta)?);
    let mut h = DMatrix::zeros(model.dy, model.dx);
    for i in 0..model.dy {
        h[(i, i)] = 1.0;
    }
    Ok((f, h))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Conditions a Gaussian `N(mean, cov)` on `y = H z + N(0, r I)`. Returns
/// `log N(y; H mean, S)`. Uses the Joseph form for the covariance.
fn condition(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    r: f64,
    y: &[f64],
    step: usize,
) -> Result<f64, KalmanError> {
    let dy = h.nrows();
    let rmat = DMatrix::identity(dy, dy) * r;
    let mut s = h * &*cov * h.transpose() + &rmat;
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(KalmanError::SingularInnovation(step))?;
    let innov = DVector::from_column_slice(y) - h * &*mean;
    let sol = chol.solve(&innov);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inc = -0.5 * (dy as f64 * LN_2PI + logdet + innov.dot(&sol));
    let k = chol.solve(&(h * &*cov)).transpose();
    *mean += &k * innov;
    let ikh = DMatrix::identity(cov.nrows(), cov.nrows()) - &k * h;
    *cov = &ikh * &*cov * ikh.transpose() + &k * rmat * k.transpose();
    symmetrize(cov);
    Ok(inc)
}

pub fn kalman_loglik(model: &LgModel, theta: &[f64], obs: Observations) -> Result<KalmanOutput, KalmanError> {
    model.validate()?;
    if obs.is_empty() {
        return Err(KalmanError::Empty);
    }
    if obs.dy != model.dy {
        return Err(SsmError::Dimension { what: "observations", expected: model.dy, found: obs.dy }.into());
    }
    let (f, h) = matrices(model, theta)?;
    let dx = model.dx;
    let q = DMatrix::identity(dx, dx) * model.q;
    let t_len = obs.len();
    let mut out = KalmanOutput {
        loglik: 0.0,
        increments: Vec::with_capacity(t_len),
        predicted_means: Vec::with_capacity(t_len),
        predicted_covs: Vec::with_capacity(t_len),
        filtered_means: Vec::with_capacity(t_len),
        filtered_covs: Vec::with_capacity(t_len),
    };
    let mut m = DVector::zeros(dx);
    let mut p = DMatrix::identity(dx, dx) * model.p0;
    for t in 0..t_len {
        if t > 0 {
            m = &f * m;
            p = &f * p * f.transpose() + &q;
            symmetrize(&mut p);
        }
        out.predicted_means.push(m.clone());
        out.predicted_covs.push(p.clone());
        let inc = condition(&mut m, &mut p, &h, model.r, obs.get(t), t)?;
        out.increments.push(inc);
        out.filtered_means.push(m.clone());
        out.filtered_covs.push(p.clone());
    }
    out.loglik = out.increments.iter().sum();
    Ok(out)
}

fn loglik_value(model: &LgModel, theta: &[f64], obs: Observations) -> Result<f64, KalmanError> {
    let ll = kalman_loglik(model, theta, obs)?.loglik;
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(KalmanError::NonFinite(theta.to_vec()))
    }
}

/// Central finite differences of the exact log-likelihood in theta.
pub fn kalman_score_fd(model: &LgModel, theta: &[f64], obs: Observations, h: f64) -> Result<Vec<f64>, KalmanError> {
    if !(h > 0.0) {
        return Err(KalmanError::BadStep(h));
    }
    let mut th = theta.to_vec();
    let mut score = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        th[i] = theta[i] + h;
        let up = loglik_value(model, &th, obs)?;
        th[i] = theta[i] - h;
        let down = loglik_value(model, &th, obs)?;
        th[i] = theta[i];
        score.push((up - down) / (2.0 * h));
    }
    Ok(score)
}

fn hessian_fd(model: &LgModel, theta: &[f64], obs: Observations, h: f64) -> Result<DMatrix<f64>, KalmanError> {
    let d = theta.len();
    let mut hess = DMatrix::zeros(d, d);
    let mut th = theta.to_vec();
    for j in 0..d {
        th[j] = theta[j] + h;
        let up = kalman_score_fd(model, &th, obs, h)?;
        th[j] = theta[j] - h;
        let down = kalman_score_fd(model, &th, obs, h)?;
        th[j] = theta[j];
        for i in 0..d {
            hess[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    symmetrize(&mut hess);
    Ok(hess)
}

#[derive(Debug, Clone)]
pub struct MleResult {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub score_norm: f64,
    pub iterations: usize,
}

/// Maximizes the exact log-likelihood by damped Newton ascent on
/// finite-difference derivatives, falling back to a gradient step when the
/// Hessian is not negative definite.
pub fn kalman_mle(model: &LgModel, theta0: &[f64], obs: Observations, tol: f64, max_iter: usize) -> Result<MleResult, KalmanError> {
    let h = 1e-5;
    let mut theta = theta0.to_vec();
    let mut ll = loglik_value(model, &theta, obs)?;
    let mut score = kalman_score_fd(model, &theta, obs, h)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut it = 0;
    while it < max_iter && norm(&score) > tol {
        it += 1;
        let hess = hessian_fd(model, &theta, obs, 1e-4)?;
        let g = DVector::from_column_slice(&score);
        let neg = -hess;
        let dir = match neg.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone() / (1.0 + neg.diagonal().abs().max()),
        };
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            if let Ok(v) = loglik_value(model, &cand, obs) {
                if v >= ll - 1e-12 {
                    theta = cand;
                    ll = v;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-10 {
                return Ok(MleResult { score_norm: norm(&score), theta, loglik: ll, iterations: it });
            }
        }
        score = kalman_score_fd(model, &theta, obs, h)?;
    }
    Ok(MleResult { score_norm: norm(&score), theta, loglik: ll, iterations: it })
}

/// Large-sample limit of the biased particle gradient for a diagonal
/// model: the sum over `t` of the expectation of
/// `grad_theta log f(x_t | x_{t-1})` under the filtered pair law
/// `p(x_{t-1}, x_t | y_{1:t})`. This differs from the score, which uses the
/// smoothed pair law instead.
pub fn filtered_pair_gradient_limit(model: &LgModel, theta: &[f64], obs: Observations) -> Result<Vec<f64>, KalmanError> {
    if !matches!(model.transition, crate::ssm::Transition::Diagonal) {
        return Err(KalmanError::Model(SsmError::InvalidModel("pair limit needs a diagonal transition".into())));
    }
    let out = kalman_loglik(model, theta, obs)?;
    let (f, h) = matrices(model, theta)?;
    let dx = model.dx;
    let mut hz = DMatrix::zeros(model.dy, 2 * dx);
    hz.view_mut((0, dx), (model.dy, dx)).copy_from(&h);
    let mut grad = vec![0.0; dx];
    for t in 1..obs.len() {
        let m = &out.filtered_means[t - 1];
        let p = &out.filtered_covs[t - 1];
        let mut mean = DVector::zeros(2 * dx);
        mean.rows_mut(0, dx).copy_from(m);
        mean.rows_mut(dx, dx).copy_from(&(&f * m));
        let mut cov = DMatrix::zeros(2 * dx, 2 * dx);
        let fp = &f * p;
        cov.view_mut((0, 0), (dx, dx)).copy_from(p);
        cov.view_mut((dx, 0), (dx, dx)).copy_from(&fp);
        cov.view_mut((0, dx), (dx, dx)).copy_from(&fp.transpose());
        cov.view_mut((dx, dx), (dx, dx)).copy_from(&(&fp * f.transpose() + DMatrix::identity(dx, dx) * model.q));
        condition(&mut mean, &mut cov, &hz, model.r, obs.get(t), t)?;
        for k in 0..dx {
            let cross = cov[(dx + k, k)] + mean[dx + k] * mean[k];
            let sq = cov[(k, k)] + mean[k] * mean[k];
            grad[k] += (cross - theta[k] * sq) / model.q;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn gauss_logpdf(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = y.len() as f64;
        let chol = cov.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (n * LN_2PI + logdet + y.dot(&chol.solve(y)))
    }

    /// Joint covariance of (y1, y2) for a scalar model.
    fn joint_cov(theta: f64, m: &LgModel) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[m.p0 + m.r, theta * m.p0, theta * m.p0, theta * theta * m.p0 + m.q + m.r],
        )
    }

    #[test]
    fn one_step_marginal() {
        let m = LgModel::diagonal(1, 0.7, 0.3);
        let out = kalman_loglik(&m, &[0.9], Observations::new(1, &[1.2])).unwrap();
        let expected = -0.5 * (LN_2PI + (1.3f64).ln() + 1.44 / 1.3);
        assert!((out.loglik - expected).abs() < 1e-14);
    }

    #[test]
    fn two_step_matches_joint_gaussian() {
        let m = LgModel::diagonal(1, 0.7, 0.3);
        let y = [0.4, -1.1];
        let out = kalman_loglik(&m, &[0.6], Observations::new(1, &y)).unwrap();
        let direct = gauss_logpdf(&DVector::from_column_slice(&y), &joint_cov(0.6, &m));
        assert!((out.loglik - direct).abs() < 1e-10);
        assert!((out.loglik - out.increments.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn two_step_score_matches_analytic() {
        let m = LgModel::diagonal(1, 0.7, 0.3);
        let y = DVector::from_column_slice(&[0.4, -1.1]);
        let theta = 0.6;
        let cov = joint_cov(theta, &m);
        let inv = cov.clone().try_inverse().unwrap();
        let dcov = DMatrix::from_row_slice(2, 2, &[0.0, m.p0, m.p0, 2.0 * theta * m.p0]);
        let alpha = &inv * &y;
        let analytic = -0.5 * (&inv * &dcov).trace() + 0.5 * alpha.dot(&(&dcov * &alpha));
        let fd = kalman_score_fd(&m, &[theta], Observations::new(1, y.as_slice()), 1e-5).unwrap();
        assert!((fd[0] - analytic).abs() < 1e-6, "{} vs {}", fd[0], analytic);
    }

    #[test]
    fn score_is_step_robust() {
        let m = LgModel::diagonal_2d();
        let tr = m.simulate(&[0.5, 0.5], 100, StreamKey::new(5, 5)).unwrap();
        let a = kalman_score_fd(&m, &[0.4, 0.6], tr.observations(), 1e-4).unwrap();
        let b = kalman_score_fd(&m, &[0.4, 0.6], tr.observations(), 5e-5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn covariances_stay_psd() {
        let m = LgModel::banded(5, 1);
        let tr = m.simulate(&[], 60, StreamKey::new(1, 2)).unwrap();
        let out = kalman_loglik(&m, &[], tr.observations()).unwrap();
        for p in out.filtered_covs.iter().chain(&out.predicted_covs) {
            assert_eq!(p, &p.transpose());
            assert!(p.symmetric_eigenvalues().min() >= -1e-10);
        }
    }

    #[test]
    fn mle_has_vanishing_score() {
        let m = LgModel::diagonal_2d();
        let tr = m.simulate(&[0.5, 0.5], 150, StreamKey::new(3, 1)).unwrap();
        let mle = kalman_mle(&m, &[0.5, 0.5], tr.observations(), 1e-6, 50).unwrap();
        let s = kalman_score_fd(&m, &mle.theta, tr.observations(), 1e-5).unwrap();
        assert!(s.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-3, "{s:?}");
        assert!(mle.loglik >= kalman_loglik(&m, &[0.5, 0.5], tr.observations()).unwrap().loglik);
    }

    #[test]
    fn pair_limit_equals_score_for_independent_states() {
        // With theta = 0 the states are independent and filtered pairs give
        // the same expectations as smoothed pairs.
        let m = LgModel::diagonal_2d();
        let tr = m.simulate(&[0.2, 0.2], 80, StreamKey::new(3, 9)).unwrap();
        let lim = filtered_pair_gradient_limit(&m, &[0.0, 0.0], tr.observations()).unwrap();
        let score = kalman_score_fd(&m, &[0.0, 0.0], tr.observations(), 1e-5).unwrap();
        for (a, b) in lim.iter().zip(&score) {
            assert!((a - b).abs() < 1e-5, "{lim:?} vs {score:?}");
        }
    }

    #[test]
    fn pair_limit_differs_from_score_under_smoothing() {
        let m = LgModel::diagonal(2, 0.5, 0.01);
        let tr = m.simulate(&[0.9, 0.9], 80, StreamKey::new(3, 9)).unwrap();
        let lim = filtered_pair_gradient_limit(&m, &[0.8, 0.8], tr.observations()).unwrap();
        let score = kalman_score_fd(&m, &[0.8, 0.8], tr.observations(), 1e-5).unwrap();
        assert!(lim.iter().zip(&score).any(|(a, b)| (a - b).abs() > 1e-2), "{lim:?} vs {score:?}");
    }
}
