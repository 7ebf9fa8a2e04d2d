//! Experiment configuration: one TOML file with a section per experiment.
//!
//! Loading starts from the preset named by `preset` (`desk` or `paper`),
//! overlays the file, then applies `section.key=value` overrides. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::ot::SinkhornGradient;
use crate::resampling::{DetConfig, Resampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornSection {
    pub tol: f64,
    pub max_iter: usize,
    /// `implicit`, `onestep` or `unrolled`.
    pub gradient: String,
    /// Divide costs by `delta(X)^2`.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub t_len: usize,
    pub q: f64,
    pub r: f64,
    pub theta_star: Vec<f64>,
    /// Each value is used for every coordinate of theta.
    pub thetas: Vec<f64>,
    pub methods: Vec<String>,
    pub n: usize,
    pub seeds: usize,
    pub ess_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub dx: usize,
    pub dy: usize,
    pub t_len: usize,
    pub datasets: usize,
    pub steps: usize,
    /// Step size on `l^/T` in log-phi coordinates.
    pub lr: f64,
    pub phi_init: f64,
    /// Subset of `pf`, `dpf`.
    pub methods: Vec<String>,
    pub n_pf: usize,
    pub n_dpf: usize,
    pub dpf_filters: usize,
    pub epsilon: f64,
    pub ess_threshold: f64,
    /// Number of final steps whose ESS is averaged.
    pub ess_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub t_len: usize,
    pub q: f64,
    pub r: f64,
    pub theta_star: Vec<f64>,
    pub datasets: usize,
    pub b_values: Vec<usize>,
    pub steps: usize,
    /// Step size on the gradient of `l^` (not divided by T).
    pub lr: f64,
    pub n_pf: usize,
    pub n_dpf: usize,
    pub epsilon: f64,
    pub ess_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasDemoConfig {
    pub dx: usize,
    pub t_len: usize,
    pub q: f64,
    pub n_values: Vec<usize>,
    pub seeds: usize,
    pub smoothing_theta_star: f64,
    pub smoothing_theta: f64,
    pub smoothing_r: f64,
    pub iid_theta_star: f64,
    pub iid_theta: f64,
    pub iid_r: f64,
    /// DPF reference row; 0 disables it.
    pub dpf_n: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub dims: Vec<usize>,
    pub t_len: usize,
    pub n: usize,
    pub points: usize,
    pub h: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Exit status 3 above this error.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornBenchConfig {
    pub n_values: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub instances: usize,
    pub dx: usize,
    /// Standard deviation of the random log-weights.
    pub weight_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub sinkhorn: SinkhornSection,
    pub table1: Table1Config,
    pub proposal: ProposalConfig,
    pub estimators: EstimatorConfig,
    pub biasdemo: BiasDemoConfig,
    pub gradcheck: GradcheckConfig,
    pub sinkhorn_bench: SinkhornBenchConfig,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            preset: Preset::Desk,
            seed: 0,
            sinkhorn: SinkhornSection { tol: 1e-8, max_iter: 20_000, gradient: "implicit".into(), normalize: true },
            table1: Table1Config {
                t_len: 150,
                q: 0.5,
                r: 0.1,
                theta_star: vec![0.5, 0.5],
                thetas: vec![0.25, 0.5, 0.75],
                methods: strings(&["multinomial", "det(0.25)", "det(0.5)", "det(0.75)"]),
                n: 25,
                seeds: 100,
                ess_threshold: 1.0,
            },
            proposal: ProposalConfig {
                dx: 5,
                dy: 1,
                t_len: 50,
                datasets: 20,
                steps: 100,
                lr: 0.1,
                phi_init: 1.0,
                methods: strings(&["pf", "dpf"]),
                n_pf: 100,
                n_dpf: 25,
                dpf_filters: 4,
                epsilon: 0.5,
                ess_threshold: 1.0,
                ess_window: 20,
            },
            estimators: EstimatorConfig {
                t_len: 50,
                q: 0.5,
                r: 0.1,
                theta_star: vec![0.5, 0.5],
                datasets: 20,
                b_values: vec![1, 4, 10],
                steps: 20,
                lr: 2.5e-3,
                n_pf: 100,
                n_dpf: 25,
                epsilon: 0.5,
                ess_threshold: 1.0,
            },
            biasdemo: BiasDemoConfig {
                dx: 1,
                t_len: 100,
                q: 0.5,
                n_values: vec![64, 512, 2048],
                seeds: 64,
                smoothing_theta_star: 0.9,
                smoothing_theta: 0.8,
                smoothing_r: 0.01,
                iid_theta_star: 0.2,
                iid_theta: 0.0,
                iid_r: 0.1,
                dpf_n: 0,
                epsilon: 0.5,
            },
            gradcheck: GradcheckConfig {
                dims: vec![1, 2],
                t_len: 5,
                n: 8,
                points: 20,
                h: 1e-5,
                epsilon: 0.5,
                tol: 1e-13,
                max_iter: 200_000,
                threshold: 1e-3,
            },
            sinkhorn_bench: SinkhornBenchConfig {
                n_values: vec![8, 25, 100],
                epsilons: vec![0.1, 0.25, 0.5, 1.0],
                instances: 50,
                dx: 2,
                weight_spread: 2.0,
            },
        }
    }

    /// Published problem sizes.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.proposal.dx = 25;
        c.proposal.t_len = 100;
        c.proposal.datasets = 100;
        c.proposal.n_pf = 500;
        c.estimators.t_len = 150;
        c.estimators.datasets = 50;
        c.estimators.steps = 100;
        c.estimators.lr = 1e-4;
        c.estimators.n_pf = 500;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses TOML text; missing keys come from the preset it names.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let parsed: Vec<(Vec<String>, toml::Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_, _>>()?;
        let mut preset = match file.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| HarnessError::Config(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        for (path, v) in &parsed {
            if path.len() == 1 && path[0] == "preset" {
                preset = Preset::deserialize(v.clone()).map_err(|e| HarnessError::Config(format!("preset: {e}")))?;
            }
        }
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut merged, file, "")?;
        for (path, v) in parsed {
            set_path(&mut merged, &path, v)?;
        }
        let cfg = Self::deserialize(toml::Value::Table(merged)).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sinkhorn_gradient(&self) -> Result<SinkhornGradient, HarnessError> {
        match self.sinkhorn.gradient.as_str() {
            "implicit" => Ok(SinkhornGradient::Implicit),
            "onestep" => Ok(SinkhornGradient::OneStep),
            "unrolled" => Ok(SinkhornGradient::Unrolled),
            other => Err(HarnessError::Config(format!("unknown sinkhorn.gradient '{other}'"))),
        }
    }

    /// DET settings at a given epsilon using the shared solver section.
    pub fn det(&self, epsilon: f64) -> DetConfig {
        DetConfig {
            epsilon,
            tol: self.sinkhorn.tol,
            max_iter: self.sinkhorn.max_iter,
            normalize: self.sinkhorn.normalize,
            gradient: self.sinkhorn_gradient().unwrap_or(SinkhornGradient::Implicit),
            fused: true,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}", i64::MAX));
        }
        self.sinkhorn_gradient()?;
        if !(self.sinkhorn.tol > 0.0) || self.sinkhorn.max_iter == 0 {
            return bad("sinkhorn.tol and sinkhorn.max_iter must be positive".into());
        }
        let t = &self.table1;
        if t.theta_star.is_empty() || t.t_len == 0 || t.n < 2 || t.seeds == 0 || t.thetas.is_empty() || t.methods.is_empty() {
            return bad("table1 needs theta_star, t_len > 0, n >= 2, seeds > 0, thetas and methods".into());
        }
        for m in &t.methods {
            parse_resampler(m, &self.det(0.5))?;
        }
        check_unit("table1.ess_threshold", t.ess_threshold)?;
        check_positive("table1.q", t.q)?;
        check_positive("table1.r", t.r)?;
        let p = &self.proposal;
        if p.dx == 0 || p.dy == 0 || p.dy > p.dx || p.t_len == 0 || p.datasets == 0 || p.n_pf < 2 || p.n_dpf < 2 || p.dpf_filters == 0 {
            return bad("proposal needs 0 < dy <= dx, t_len > 0, datasets > 0, n_pf, n_dpf >= 2, dpf_filters > 0".into());
        }
        if p.methods.is_empty() || p.methods.iter().any(|m| m != "pf" && m != "dpf") {
            return bad(format!("proposal.methods must be a non-empty subset of pf, dpf; got {:?}", p.methods));
        }
        check_positive("proposal.epsilon", p.epsilon)?;
        check_positive("proposal.phi_init", p.phi_init)?;
        check_unit("proposal.ess_threshold", p.ess_threshold)?;
        let e = &self.estimators;
        if e.theta_star.is_empty() || e.t_len == 0 || e.datasets == 0 || e.b_values.iter().any(|&b| b == 0) || e.b_values.is_empty() || e.n_pf < 2 || e.n_dpf < 2 {
            return bad("estimators needs theta_star, t_len > 0, datasets > 0, positive b_values, n_pf, n_dpf >= 2".into());
        }
        check_positive("estimators.epsilon", e.epsilon)?;
        check_positive("estimators.q", e.q)?;
        check_positive("estimators.r", e.r)?;
        check_unit("estimators.ess_threshold", e.ess_threshold)?;
        let b = &self.biasdemo;
        if b.dx == 0 || b.t_len < 2 || b.seeds < 2 || b.n_values.iter().any(|&n| n < 2) || b.n_values.is_empty() || b.dpf_n == 1 {
            return bad("biasdemo needs dx > 0, t_len >= 2, seeds >= 2, n_values >= 2".into());
        }
        check_positive("biasdemo.epsilon", b.epsilon)?;
        check_positive("biasdemo.smoothing_r", b.smoothing_r)?;
        check_positive("biasdemo.iid_r", b.iid_r)?;
        check_positive("biasdemo.q", b.q)?;
        let g = &self.gradcheck;
        if g.dims.is_empty() || g.dims.contains(&0) || g.t_len == 0 || g.n < 2 || g.points == 0 || !(g.h > 0.0) || !(g.tol > 0.0) {
            return bad("gradcheck needs positive dims, t_len, points, h, tol and n >= 2".into());
        }
        check_positive("gradcheck.epsilon", g.epsilon)?;
        let s = &self.sinkhorn_bench;
        if s.n_values.is_empty() || s.n_values.contains(&0) || s.epsilons.is_empty() || s.instances == 0 || s.dx == 0 {
            return bad("sinkhorn_bench needs positive n_values, epsilons, instances and dx".into());
        }
        for &eps in &s.epsilons {
            check_positive("sinkhorn_bench.epsilons", eps)?;
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_unit(name: &str, v: f64) -> Result<(), HarnessError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Parses `multinomial | systematic | soft(alpha) | det(eps) | exact_et`.
pub fn parse_resampler(name: &str, det: &DetConfig) -> Result<Resampler, HarnessError> {
    let name = name.trim();
    let arg = |prefix: &str| -> Option<Result<f64, HarnessError>> {
        let inner = name.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
        Some(inner.trim().parse::<f64>().map_err(|_| HarnessError::Config(format!("bad number in resampler '{name}'"))))
    };
    match name {
        "multinomial" => return Ok(Resampler::Multinomial),
        "systematic" => return Ok(Resampler::Systematic),
        "exact_et" => return Ok(Resampler::ExactEt),
        "det" => return Ok(Resampler::Det(*det)),
        _ => {}
    }
    if let Some(alpha) = arg("soft") {
        let alpha = alpha?;
        check_unit("soft alpha", alpha)?;
        return Ok(Resampler::Soft { alpha });
    }
    if let Some(eps) = arg("det") {
        let eps = eps?;
        check_positive("det epsilon", eps)?;
        return Ok(Resampler::Det(DetConfig { epsilon: eps, ..*det }));
    }
    Err(HarnessError::Config(format!("unknown resampler '{name}' (expected multinomial, systematic, soft(a), det(eps) or exact_et)")))
}

fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value), HarnessError> {
    let (key, raw) = text.split_once('=').ok_or_else(|| HarnessError::Config(format!("override '{text}' is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("override '{text}' has an empty key segment")));
    }
    let raw = raw.trim();
    // Bare words such as `paper` or `det(0.5)` are taken as strings.
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<(), HarnessError> {
    for (k, v) in over {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &name)?,
            (Some(_), toml::Value::Table(_)) | (Some(toml::Value::Table(_)), _) => {
                return Err(HarnessError::Config(format!("'{name}' has the wrong shape")));
            }
            (Some(slot), v) => *slot = coerce(slot, v),
            (None, _) => return Err(HarnessError::Config(format!("unknown config key '{name}'"))),
        }
    }
    Ok(())
}

/// Lets integers stand in for floats and a scalar for a one-element list.
fn coerce(current: &toml::Value, v: toml::Value) -> toml::Value {
    match (current, v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::Array(a), toml::Value::Array(items)) if a.first().is_some_and(|x| x.is_float()) => {
            toml::Value::Array(items.into_iter().map(|x| if let toml::Value::Integer(i) = x { toml::Value::Float(i as f64) } else { x }).collect())
        }
        (toml::Value::Array(a), v) if !v.is_array() => coerce(&toml::Value::Array(a.clone()), toml::Value::Array(vec![v])),
        (_, v) => v,
    }
}

fn set_path(table: &mut toml::Table, path: &[String], v: toml::Value) -> Result<(), HarnessError> {
    let joined = path.join(".");
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(HarnessError::Config(format!("unknown config key '{joined}'"))),
        };
    }
    match cur.get_mut(last) {
        Some(toml::Value::Table(_)) => Err(HarnessError::Config(format!("'{joined}' is a section, not a value"))),
        Some(slot) => {
            *slot = coerce(slot, v);
            Ok(())
        }
        None => Err(HarnessError::Config(format!("unknown config key '{joined}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper()] {
            let text = cfg.to_toml_string();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml_string(), text);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn partial_files_fill_from_the_preset() {
        let cfg = ExperimentConfig::from_toml_str("preset = \"paper\"\nseed = 4\n[table1]\nseeds = 7\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.table1.seeds, 7);
        assert_eq!(cfg.proposal.dx, 25);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn overrides_apply_in_order() {
        let ov = vec!["table1.seeds=3".to_string(), "table1.methods=[\"systematic\", \"soft(0.5)\"]".into(), "sinkhorn.tol=1e-9".into(), "proposal.lr=1".into()];
        let cfg = ExperimentConfig::from_toml_with_overrides("", &ov).unwrap();
        assert_eq!(cfg.table1.seeds, 3);
        assert_eq!(cfg.table1.methods, vec!["systematic", "soft(0.5)"]);
        assert_eq!(cfg.sinkhorn.tol, 1e-9);
        assert_eq!(cfg.proposal.lr, 1.0);
        let cfg = ExperimentConfig::from_toml_with_overrides("", &["preset=paper".into(), "table1.thetas=0.5".into()]).unwrap();
        assert_eq!(cfg.preset, Preset::Paper);
        assert_eq!(cfg.table1.thetas, vec![0.5]);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in ["nonsense = 1", "[table1]\nbogus = 2", "[table1]\nseeds = \"many\"", "seed = [", "[table1]\nmethods = [\"magic\"]", "[sinkhorn]\ngradient = \"fast\""] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(HarnessError::Config(_))), "{text}");
        }
        for ov in ["table1", "table1.nope=1", "table1=3", ".x=1"] {
            assert!(ExperimentConfig::from_toml_with_overrides("", &[ov.to_string()]).is_err(), "{ov}");
        }
        let mut c = ExperimentConfig::desk();
        c.seed = u64::MAX;
        assert!(c.validate().is_err());
        let err = ExperimentConfig::load(Path::new("/nonexistent/cfg.toml"), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn resampler_names() {
        let det = DetConfig::default();
        assert_eq!(parse_resampler("multinomial", &det).unwrap(), Resampler::Multinomial);
        assert_eq!(parse_resampler("systematic", &det).unwrap(), Resampler::Systematic);
        assert_eq!(parse_resampler("exact_et", &det).unwrap(), Resampler::ExactEt);
        assert_eq!(parse_resampler("soft(0.25)", &det).unwrap(), Resampler::Soft { alpha: 0.25 });
        match parse_resampler("det( 0.1 )", &det).unwrap() {
            Resampler::Det(d) => assert_eq!(d.epsilon, 0.1),
            other => panic!("{other:?}"),
        }
        for bad in ["det(0)", "soft(2)", "det(x)", "stratified", "det(0.5"] {
            assert!(parse_resampler(bad, &det).is_err(), "{bad}");
        }
    }
}
