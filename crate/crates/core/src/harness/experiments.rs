//! Experiment drivers. Each returns its numbers plus the CSV reports built
//! from them; nothing here depends on wall-clock time.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use super::config::{parse_resampler, ExperimentConfig, ProposalConfig};
use super::csv::{fmt_f64, CsvReport};
use super::HarnessError;
use crate::autodiff::finite_diff_check;
use crate::filter::{
    biased_elbo_gradient, dpf_gradient, elbo_estimate, run_filter, smle_gradient, ElboSummary, FilterConfig, FilterError,
    FilterLoglik, GradientEstimate,
};
use crate::kalman::{filtered_pair_gradient_limit, kalman_mle, kalman_score_fd};
use crate::ot::{cost_matrix, log_marginal, sinkhorn_log, SinkhornConfig};
use crate::resampling::Resampler;
use crate::rng::{name_id, Purpose, StreamKey};
use crate::ssm::{LgModel, Observations, Proposal};

fn numerical(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

fn filter_err(e: FilterError) -> HarnessError {
    match e {
        FilterError::Config(m) => HarnessError::Config(m),
        other => numerical(other),
    }
}

fn key(name: &str, seed: u64) -> StreamKey {
    StreamKey::new(name_id(name), seed)
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn base_meta(r: &mut CsvReport, experiment: &str, cfg: &ExperimentConfig) {
    r.meta("experiment", experiment);
    r.meta("preset", format!("{:?}", cfg.preset).to_lowercase());
    r.meta("seed", cfg.seed);
    r.meta("config_hash", cfg.hash());
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and standard error of the mean.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (m, (var / xs.len() as f64).sqrt())
}

// ---------------------------------------------------------------- table 1

#[derive(Debug, Clone)]
pub struct Table1Row {
    pub theta: f64,
    /// Resampler family, e.g. `multinomial` or `det`.
    pub method: String,
    pub epsilon: Option<f64>,
    pub summary: ElboSummary,
}

#[derive(Debug, Clone)]
pub struct Table1Outcome {
    pub rows: Vec<Table1Row>,
    pub report: CsvReport,
}

impl Table1Outcome {
    pub fn get(&self, theta: f64, method: &str, epsilon: Option<f64>) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.theta == theta && r.method == method && r.epsilon == epsilon)
    }
}

fn method_label(r: &Resampler) -> (String, Option<f64>) {
    match r {
        Resampler::Det(d) => ("det".into(), Some(d.epsilon)),
        Resampler::Soft { alpha } => (format!("soft({alpha})"), None),
        other => (other.name().to_string(), None),
    }
}

/// ELBO `(l^ - l) / T` on one simulated dataset for each theta and method,
/// with the same filter seeds shared across all cells.
pub fn table1(cfg: &ExperimentConfig) -> Result<Table1Outcome, HarnessError> {
    let c = &cfg.table1;
    let dim = c.theta_star.len();
    let model = LgModel::diagonal(dim, c.q, c.r);
    let traj = model.simulate(&c.theta_star, c.t_len, key("table1/data", cfg.seed)).map_err(|e| HarnessError::Config(e.to_string()))?;
    let root = key("table1/filter", cfg.seed);
    let keys: Vec<StreamKey> = (0..c.seeds as u64).map(|s| root.child(s)).collect();
    let mut report = CsvReport::new("table1", &["theta", "method", "epsilon", "mean", "std", "n_seeds"]);
    base_meta(&mut report, "table1", cfg);
    report.meta("t_len", c.t_len);
    report.meta("n", c.n);
    report.meta("theta_star", list(&c.theta_star));
    let mut rows = Vec::new();
    for &theta in &c.thetas {
        let th = vec![theta; dim];
        for m in &c.methods {
            let res = parse_resampler(m, &cfg.det(0.5))?;
            let fc = FilterConfig { ess_threshold: c.ess_threshold, ..FilterConfig::new(c.n, res) };
            let summary = elbo_estimate(&model, &th, None, traj.observations(), &fc, &keys).map_err(filter_err)?;
            let (method, epsilon) = method_label(&res);
            report.push(vec![
                fmt_f64(theta),
                method.clone(),
                epsilon.map(fmt_f64).unwrap_or_default(),
                fmt_f64(summary.mean),
                fmt_f64(summary.std),
                summary.n_seeds.to_string(),
            ]);
            rows.push(Table1Row { theta, method, epsilon, summary });
        }
    }
    Ok(Table1Outcome { rows, report })
}

// ------------------------------------------------------ proposal learning

#[derive(Debug, Clone)]
pub struct ProposalRun {
    pub dataset: usize,
    pub method: String,
    /// Root mean square distance of the learned phi from 1, the locally
    /// optimal proposal. NaN when the run diverged.
    pub rmse: f64,
    /// ESS fraction averaged over the last `ess_window` steps.
    pub ess: f64,
    pub diverged: bool,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProposalOutcome {
    pub runs: Vec<ProposalRun>,
    pub reports: Vec<CsvReport>,
}

impl ProposalOutcome {
    pub fn run(&self, dataset: usize, method: &str) -> Option<&ProposalRun> {
        self.runs.iter().find(|r| r.dataset == dataset && r.method == method)
    }

    /// Fractions of datasets where DPF has lower RMSE and higher ESS than
    /// PF. A diverged DPF run loses; a diverged PF run against a finished
    /// DPF run is a DPF win.
    pub fn dpf_win_fractions(&self) -> Option<(f64, f64)> {
        let datasets: Vec<usize> = self.runs.iter().filter(|r| r.method == "dpf").map(|r| r.dataset).collect();
        let (mut rmse, mut ess, mut total) = (0usize, 0usize, 0usize);
        for d in datasets {
            let (Some(dpf), Some(pf)) = (self.run(d, "dpf"), self.run(d, "pf")) else { continue };
            total += 1;
            if !dpf.diverged && (pf.diverged || dpf.rmse < pf.rmse) {
                rmse += 1;
            }
            if !dpf.diverged && (pf.diverged || dpf.ess > pf.ess) {
                ess += 1;
            }
        }
        (total > 0).then(|| (rmse as f64 / total as f64, ess as f64 / total as f64))
    }
}

fn learn_proposal(model: &LgModel, obs: Observations, c: &ProposalConfig, fc: &FilterConfig, dpf: bool, dataset: usize, root: StreamKey) -> ProposalRun {
    let dx = model.dx;
    let filters = if dpf { c.dpf_filters } else { 1 };
    let t = obs.len() as f64;
    let mut log_phi = vec![c.phi_init.ln(); dx];
    let mut ess_hist = Vec::with_capacity(c.steps);
    let method = if dpf { "dpf" } else { "pf" }.to_string();
    let diverged = |phi: Vec<f64>| ProposalRun { dataset, method: method.clone(), rmse: f64::NAN, ess: f64::NAN, diverged: true, phi };
    for step in 0..c.steps {
        let phi: Vec<f64> = log_phi.iter().map(|l| l.exp()).collect();
        let mut g = vec![0.0; dx];
        let mut ess = 0.0;
        for r in 0..filters {
            let k = root.child((step * filters + r) as u64);
            let est: Result<GradientEstimate, FilterError> = if dpf {
                dpf_gradient(model, &[], Some(&phi), obs, fc, k)
            } else {
                biased_elbo_gradient(model, &[], Some(&phi), obs, fc, k)
            };
            let Ok(est) = est else { return diverged(phi) };
            for (gi, e) in g.iter_mut().zip(est.phi_part(model)) {
                *gi += e;
            }
            ess += est.mean_ess_fraction;
        }
        ess_hist.push(ess / filters as f64);
        for i in 0..dx {
            // d/dlog(phi) = phi * d/dphi
            log_phi[i] += c.lr * phi[i] * g[i] / (filters as f64 * t);
        }
        if log_phi.iter().any(|l| !l.is_finite() || l.abs() > 50.0) {
            return diverged(phi);
        }
    }
    let phi: Vec<f64> = log_phi.iter().map(|l| l.exp()).collect();
    let rmse = (phi.iter().map(|p| (p - 1.0).powi(2)).sum::<f64>() / dx as f64).sqrt();
    let window = c.ess_window.clamp(1, ess_hist.len().max(1));
    let ess = if ess_hist.is_empty() { f64::NAN } else { mean(&ess_hist[ess_hist.len() - window..]) };
    ProposalRun { dataset, method, rmse, ess, diverged: false, phi }
}

/// Learns the proposal scales on independent datasets from the banded
/// model, once with the biased PF gradient and once with the DPF gradient.
pub fn proposal_learning(cfg: &ExperimentConfig) -> Result<ProposalOutcome, HarnessError> {
    let c = &cfg.proposal;
    let model = LgModel::banded(c.dx, c.dy);
    let pf_cfg = FilterConfig { ess_threshold: c.ess_threshold, ..FilterConfig::new(c.n_pf, Resampler::Multinomial) };
    let dpf_cfg = FilterConfig { ess_threshold: c.ess_threshold, ..FilterConfig::new(c.n_dpf, Resampler::Det(cfg.det(c.epsilon))) };
    let per_dataset: Vec<Vec<ProposalRun>> = (0..c.datasets)
        .into_par_iter()
        .map(|d| {
            let traj = model.simulate(&[], c.t_len, key("proposal/data", cfg.seed).child(d as u64)).map_err(|e| HarnessError::Config(e.to_string()))?;
            let mut out = Vec::new();
            for m in &c.methods {
                let dpf = m == "dpf";
                let fc = if dpf { &dpf_cfg } else { &pf_cfg };
                let root = key(&format!("proposal/{m}"), cfg.seed).child(d as u64);
                out.push(learn_proposal(&model, traj.observations(), c, fc, dpf, d, root));
            }
            Ok(out)
        })
        .collect::<Result<_, HarnessError>>()?;
    let runs: Vec<ProposalRun> = per_dataset.into_iter().flatten().collect();
    if runs.iter().all(|r| r.diverged) {
        return Err(numerical("every proposal-learning run diverged"));
    }
    let mut detail = CsvReport::new("proposal_runs", &["dataset", "method", "rmse", "ess", "diverged"]);
    base_meta(&mut detail, "proposal", cfg);
    detail.meta("dx", c.dx);
    detail.meta("dy", c.dy);
    detail.meta("t_len", c.t_len);
    for r in &runs {
        detail.push(vec![r.dataset.to_string(), r.method.clone(), fmt_f64(r.rmse), fmt_f64(r.ess), r.diverged.to_string()]);
    }
    let mut summary = CsvReport::new("proposal_summary", &["method", "n_particles", "filters", "mean_rmse", "mean_ess", "finished", "diverged"]);
    base_meta(&mut summary, "proposal", cfg);
    for m in &c.methods {
        let ok: Vec<&ProposalRun> = runs.iter().filter(|r| &r.method == m && !r.diverged).collect();
        let div = runs.iter().filter(|r| &r.method == m && r.diverged).count();
        let (n, filters) = if m == "dpf" { (c.n_dpf, c.dpf_filters) } else { (c.n_pf, 1) };
        let avg = |f: fn(&ProposalRun) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64 };
        summary.push(vec![m.clone(), n.to_string(), filters.to_string(), fmt_f64(avg(|r| r.rmse)), fmt_f64(avg(|r| r.ess)), ok.len().to_string(), div.to_string()]);
    }
    let outcome = ProposalOutcome { runs, reports: vec![] };
    if let Some((rmse, ess)) = outcome.dpf_win_fractions() {
        summary.meta("dpf_lower_rmse_fraction", rmse);
        summary.meta("dpf_higher_ess_fraction", ess);
    }
    Ok(ProposalOutcome { reports: vec![detail, summary], ..outcome })
}

// -------------------------------------------------- estimator comparison

pub const ESTIMATORS: [&str; 3] = ["pf", "dpf", "smle"];

#[derive(Debug, Clone)]
pub struct EstimatorRun {
    pub dataset: usize,
    pub method: String,
    pub b: usize,
    pub theta: Vec<f64>,
    pub mle: Vec<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct EstimatorOutcome {
    pub runs: Vec<EstimatorRun>,
    pub reports: Vec<CsvReport>,
}

impl EstimatorOutcome {
    /// `sqrt(mean ||theta^ - theta_MLE||^2)` over finished runs.
    pub fn rmse(&self, method: &str, b: usize) -> Option<f64> {
        let ok: Vec<&EstimatorRun> = self.runs.iter().filter(|r| r.method == method && r.b == b && !r.diverged).collect();
        if ok.is_empty() {
            return None;
        }
        let sq: f64 = ok.iter().map(|r| r.theta.iter().zip(&r.mle).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum();
        Some((sq / ok.len() as f64).sqrt())
    }

    pub fn diverged(&self, method: &str, b: usize) -> usize {
        self.runs.iter().filter(|r| r.method == method && r.b == b && r.diverged).count()
    }
}

/// Gradient ascent on theta from `theta_star` with each estimator, compared
/// against the exact maximum likelihood estimate. PF and DPF draw fresh
/// noise at every step; SMLE ascends the average of `B` DET filters with
/// fixed noise.
pub fn estimator_comparison(cfg: &ExperimentConfig) -> Result<EstimatorOutcome, HarnessError> {
    let c = &cfg.estimators;
    let dim = c.theta_star.len();
    let model = LgModel::diagonal(dim, c.q, c.r);
    let pf_cfg = FilterConfig { ess_threshold: c.ess_threshold, ..FilterConfig::new(c.n_pf, Resampler::Multinomial) };
    let dpf_cfg = FilterConfig { ess_threshold: c.ess_threshold, ..FilterConfig::new(c.n_dpf, Resampler::Det(cfg.det(c.epsilon))) };
    let per_dataset: Vec<Vec<EstimatorRun>> = (0..c.datasets)
        .into_par_iter()
        .map(|d| {
            let traj = model.simulate(&c.theta_star, c.t_len, key("estimators/data", cfg.seed).child(d as u64)).map_err(|e| HarnessError::Config(e.to_string()))?;
            let obs = traj.observations();
            let mle = kalman_mle(&model, &c.theta_star, obs, 1e-8, 100).map_err(numerical)?.theta;
            let mut out = Vec::new();
            for &b in &c.b_values {
                for m in ESTIMATORS {
                    let root = key(&format!("estimators/{m}/b{b}"), cfg.seed).child(d as u64);
                    let fixed: Vec<StreamKey> = (0..b as u64).map(|i| root.child(i)).collect();
                    let mut theta = c.theta_star.clone();
                    let mut diverged = false;
                    for step in 0..c.steps {
                        let g = match m {
                            "smle" => smle_gradient(&model, &theta, obs, &dpf_cfg, &fixed).map(|(_, g)| g),
                            _ => (0..b)
                                .map(|i| {
                                    let k = root.child((1_000_000 + step * b + i) as u64);
                                    let est = if m == "dpf" { dpf_gradient(&model, &theta, None, obs, &dpf_cfg, k) } else { biased_elbo_gradient(&model, &theta, None, obs, &pf_cfg, k) };
                                    est.map(|e| e.theta_part(&model).to_vec())
                                })
                                .collect::<Result<Vec<Vec<f64>>, _>>()
                                .map(|gs| (0..dim).map(|j| gs.iter().map(|g| g[j]).sum::<f64>() / b as f64).collect()),
                        };
                        match g {
                            Ok(g) => {
                                for (t, gi) in theta.iter_mut().zip(&g) {
                                    *t += c.lr * gi;
                                }
                            }
                            Err(_) => diverged = true,
                        }
                        if diverged || theta.iter().any(|t| !t.is_finite() || t.abs() > 10.0) {
                            diverged = true;
                            break;
                        }
                    }
                    out.push(EstimatorRun { dataset: d, method: m.to_string(), b, theta, mle: mle.clone(), diverged });
                }
            }
            Ok(out)
        })
        .collect::<Result<_, HarnessError>>()?;
    let runs: Vec<EstimatorRun> = per_dataset.into_iter().flatten().collect();
    if runs.iter().all(|r| r.diverged) {
        return Err(numerical("every estimator run diverged"));
    }
    let mut detail_header = vec!["dataset".to_string(), "method".into(), "b".into(), "diverged".into()];
    detail_header.extend((0..dim).map(|j| format!("theta_{j}")));
    detail_header.extend((0..dim).map(|j| format!("mle_{j}")));
    let mut detail = CsvReport { name: "estimators_runs".into(), header: detail_header, rows: vec![], meta: vec![] };
    base_meta(&mut detail, "estimators", cfg);
    for r in &runs {
        let mut row = vec![r.dataset.to_string(), r.method.clone(), r.b.to_string(), r.diverged.to_string()];
        row.extend(r.theta.iter().chain(&r.mle).map(|&x| fmt_f64(x)));
        detail.push(row);
    }
    let outcome = EstimatorOutcome { runs, reports: vec![] };
    let mut summary = CsvReport::new("estimators", &["method", "b", "rmse_x1e3", "finished", "diverged"]);
    base_meta(&mut summary, "estimators", cfg);
    summary.meta("t_len", c.t_len);
    summary.meta("steps", c.steps);
    summary.meta("lr", c.lr);
    for &b in &c.b_values {
        for m in ESTIMATORS {
            let div = outcome.diverged(m, b);
            summary.push(vec![
                m.to_string(),
                b.to_string(),
                fmt_f64(outcome.rmse(m, b).map_or(f64::NAN, |r| r * 1e3)),
                (c.datasets - div).to_string(),
                div.to_string(),
            ]);
        }
    }
    Ok(EstimatorOutcome { reports: vec![detail, summary], ..outcome })
}

// -------------------------------------------------------------- bias demo

#[derive(Debug, Clone)]
pub struct BiasRow {
    /// `smoothing` or `iid`.
    pub config: String,
    /// `pf` (biased gradient) or `dpf`.
    pub estimator: String,
    pub n: usize,
    pub coord: usize,
    pub mean: f64,
    pub se: f64,
    /// Exact score of the log-likelihood.
    pub score: f64,
    /// Large-N limit of the biased gradient.
    pub limit: f64,
}

impl BiasRow {
    pub fn z_score(&self) -> f64 {
        (self.mean - self.score) / self.se
    }
    pub fn z_limit(&self) -> f64 {
        (self.mean - self.limit) / self.se
    }
}

#[derive(Debug, Clone)]
pub struct BiasOutcome {
    pub rows: Vec<BiasRow>,
    pub report: CsvReport,
}

impl BiasOutcome {
    pub fn get(&self, config: &str, estimator: &str, n: usize, coord: usize) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.config == config && r.estimator == estimator && r.n == n && r.coord == coord)
    }
}

/// Compares the mean of the resampling-blind gradient with the exact score
/// for a strongly informative observation model (the filtered and smoothed
/// pair laws differ) and for a weakly dependent one (they nearly agree).
pub fn bias_demo(cfg: &ExperimentConfig) -> Result<BiasOutcome, HarnessError> {
    let c = &cfg.biasdemo;
    let configs = [("smoothing", c.smoothing_theta_star, c.smoothing_theta, c.smoothing_r), ("iid", c.iid_theta_star, c.iid_theta, c.iid_r)];
    let mut rows = Vec::new();
    for (name, theta_star, theta, r) in configs {
        let model = LgModel::diagonal(c.dx, c.q, r);
        let traj = model.simulate(&vec![theta_star; c.dx], c.t_len, key(&format!("biasdemo/{name}/data"), cfg.seed)).map_err(|e| HarnessError::Config(e.to_string()))?;
        let obs = traj.observations();
        let th = vec![theta; c.dx];
        let score = kalman_score_fd(&model, &th, obs, 1e-5).map_err(numerical)?;
        let limit = filtered_pair_gradient_limit(&model, &th, obs).map_err(numerical)?;
        let mut runs: Vec<(&str, usize, FilterConfig)> =
            c.n_values.iter().map(|&n| ("pf", n, FilterConfig::every_step(n, Resampler::Multinomial))).collect();
        if c.dpf_n > 0 {
            runs.push(("dpf", c.dpf_n, FilterConfig::every_step(c.dpf_n, Resampler::Det(cfg.det(c.epsilon)))));
        }
        for (estimator, n, fc) in runs {
            let root = key(&format!("biasdemo/{name}/{estimator}/{n}"), cfg.seed);
            let grads: Vec<Vec<f64>> = (0..c.seeds as u64)
                .into_par_iter()
                .map(|s| {
                    let k = root.child(s);
                    let est = if estimator == "dpf" { dpf_gradient(&model, &th, None, obs, &fc, k) } else { biased_elbo_gradient(&model, &th, None, obs, &fc, k) };
                    est.map(|e| e.theta_part(&model).to_vec())
                })
                .collect::<Result<_, _>>()
                .map_err(filter_err)?;
            for j in 0..c.dx {
                let col: Vec<f64> = grads.iter().map(|g| g[j]).collect();
                let (m, se) = mean_se(&col);
                rows.push(BiasRow { config: name.into(), estimator: estimator.into(), n, coord: j, mean: m, se, score: score[j], limit: limit[j] });
            }
        }
    }
    let mut report = CsvReport::new("biasdemo", &["config", "estimator", "n", "coord", "mean", "se", "score", "limit", "z_score", "z_limit"]);
    base_meta(&mut report, "biasdemo", cfg);
    report.meta("t_len", c.t_len);
    report.meta("seeds", c.seeds);
    for r in &rows {
        report.push(vec![
            r.config.clone(),
            r.estimator.clone(),
            r.n.to_string(),
            r.coord.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.se),
            fmt_f64(r.score),
            fmt_f64(r.limit),
            fmt_f64(r.z_score()),
            fmt_f64(r.z_limit()),
        ]);
    }
    Ok(BiasOutcome { rows, report })
}

// -------------------------------------------------------------- gradcheck

#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub point: usize,
    pub dx: usize,
    pub learned: bool,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub rows: Vec<GradcheckRow>,
    pub max_error: f64,
    pub report: CsvReport,
}

/// Recorded DPF gradient against central differences at random parameter
/// points; odd points use the learned proposal and also check phi.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckOutcome, HarnessError> {
    let c = &cfg.gradcheck;
    let det = crate::resampling::DetConfig { tol: c.tol, max_iter: c.max_iter, ..cfg.det(c.epsilon) };
    let fc = FilterConfig::every_step(c.n, Resampler::Det(det));
    let jobs: Vec<(usize, usize)> = c.dims.iter().flat_map(|&dx| (0..c.points).map(move |p| (p, dx))).collect();
    let rows: Vec<GradcheckRow> = jobs
        .into_par_iter()
        .map(|(p, dx)| {
            let model = LgModel::diagonal(dx, 0.5, 0.1);
            let mut rng = key(&format!("gradcheck/point/{dx}"), cfg.seed).stream(p as u64, Purpose::Initialization);
            let theta: Vec<f64> = (0..dx).map(|_| rng.gen_range(0.2..0.8)).collect();
            let phi: Vec<f64> = (0..dx).map(|_| rng.gen_range(0.7..1.3)).collect();
            let learned = p % 2 == 1;
            let traj = model.simulate(&theta, c.t_len, key(&format!("gradcheck/data/{dx}"), cfg.seed).child(p as u64)).map_err(numerical)?;
            let fkey = key(&format!("gradcheck/filter/{dx}"), cfg.seed).child(p as u64);
            let proposal = if learned { Proposal::Learned(&phi[..]) } else { Proposal::Bootstrap };
            // Surface solver failures as errors before the panicking ScalarFn runs.
            run_filter::<f64>(&model, &theta, &proposal, traj.observations(), &fc, fkey).map_err(filter_err)?;
            let f = FilterLoglik { model: &model, obs: traj.observations(), cfg: fc, key: fkey, learned };
            let point: Vec<f64> = if learned { theta.iter().chain(&phi).copied().collect() } else { theta.clone() };
            let r = finite_diff_check(&f, &point, c.h).map_err(numerical)?;
            Ok(GradcheckRow { point: p, dx, learned, max_rel_error: r.max_rel_error })
        })
        .collect::<Result<_, HarnessError>>()?;
    let max_error = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut report = CsvReport::new("gradcheck", &["point", "dx", "proposal", "max_rel_error"]);
    base_meta(&mut report, "gradcheck", cfg);
    report.meta("t_len", c.t_len);
    report.meta("n", c.n);
    report.meta("h", c.h);
    report.meta("max_error", fmt_f64(max_error));
    for r in &rows {
        report.push(vec![r.point.to_string(), r.dx.to_string(), if r.learned { "learned" } else { "bootstrap" }.into(), fmt_f64(r.max_rel_error)]);
    }
    Ok(GradcheckOutcome { rows, max_error, report })
}

// --------------------------------------------------------- sinkhorn bench

#[derive(Debug, Clone)]
pub struct SinkhornBenchCell {
    pub n: usize,
    pub epsilon: f64,
    pub iterations: Vec<usize>,
    pub converged: usize,
    /// Wall time for all instances; kept out of the CSV.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SinkhornBenchOutcome {
    pub cells: Vec<SinkhornBenchCell>,
    pub report: CsvReport,
}

/// Iteration counts of the log-domain solver on random resampling
/// problems: uniform rows, random column weights, normalized costs.
pub fn sinkhorn_bench(cfg: &ExperimentConfig) -> Result<SinkhornBenchOutcome, HarnessError> {
    let c = &cfg.sinkhorn_bench;
    let mut cells = Vec::new();
    for &n in &c.n_values {
        for &epsilon in &c.epsilons {
            let scfg = SinkhornConfig { epsilon, tol: cfg.sinkhorn.tol, max_iter: cfg.sinkhorn.max_iter };
            let start = Instant::now();
            let mut iterations = Vec::with_capacity(c.instances);
            let mut converged = 0;
            for i in 0..c.instances {
                let k = key(&format!("sinkhorn_bench/{n}"), cfg.seed).child(i as u64);
                let x = k.normals(0, Purpose::Test, n * c.dx);
                let raw: Vec<f64> = k.normals(1, Purpose::Test, n).iter().map(|z| (c.weight_spread * z).exp()).collect();
                let total: f64 = raw.iter().sum();
                let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let lb = log_marginal(&w).map_err(numerical)?;
                let la = vec![-(n as f64).ln(); n];
                let cost = cost_matrix(&x, &x, c.dx, cfg.sinkhorn.normalize).map_err(numerical)?;
                let res = sinkhorn_log(&la, &lb, &cost.data, &scfg).map_err(numerical)?;
                iterations.push(res.iterations);
                converged += res.converged as usize;
            }
            cells.push(SinkhornBenchCell { n, epsilon, iterations, converged, seconds: start.elapsed().as_secs_f64() });
        }
    }
    let mut report = CsvReport::new("sinkhorn_bench", &["n", "epsilon", "instances", "mean_iters", "median_iters", "max_iters", "converged"]);
    base_meta(&mut report, "sinkhorn_bench", cfg);
    report.meta("tol", cfg.sinkhorn.tol);
    for cell in &cells {
        let mut sorted = cell.iterations.clone();
        sorted.sort_unstable();
        let mean_it = sorted.iter().sum::<usize>() as f64 / sorted.len() as f64;
        report.push(vec![
            cell.n.to_string(),
            fmt_f64(cell.epsilon),
            sorted.len().to_string(),
            fmt_f64(mean_it),
            sorted[sorted.len() / 2].to_string(),
            sorted[sorted.len() - 1].to_string(),
            cell.converged.to_string(),
        ]);
    }
    Ok(SinkhornBenchOutcome { cells, report })
}
