//! Experiment harness: configuration, drivers and deterministic CSV output.

pub mod config;
pub mod csv;
pub mod experiments;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

pub use config::{parse_resampler, ExperimentConfig, Preset};
pub use csv::{fmt_f64, CsvReport};
pub use experiments::{
    bias_demo, estimator_comparison, gradcheck, proposal_learning, sinkhorn_bench, table1, BiasOutcome, EstimatorOutcome,
    GradcheckOutcome, ProposalOutcome, SinkhornBenchOutcome, Table1Outcome,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Table1,
    Proposal,
    Estimators,
    BiasDemo,
    Gradcheck,
    SinkhornBench,
}

impl Experiment {
    pub const ALL: [Experiment; 6] =
        [Experiment::Table1, Experiment::Proposal, Experiment::Estimators, Experiment::BiasDemo, Experiment::Gradcheck, Experiment::SinkhornBench];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Proposal => "proposal",
            Experiment::Estimators => "estimators",
            Experiment::BiasDemo => "biasdemo",
            Experiment::Gradcheck => "gradcheck",
            Experiment::SinkhornBench => "sinkhorn-bench",
        }
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| HarnessError::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Table1(Table1Outcome),
    Proposal(ProposalOutcome),
    Estimators(EstimatorOutcome),
    BiasDemo(BiasOutcome),
    Gradcheck(GradcheckOutcome),
    SinkhornBench(SinkhornBenchOutcome),
}

impl Outcome {
    pub fn reports(&self) -> Vec<&CsvReport> {
        match self {
            Outcome::Table1(o) => vec![&o.report],
            Outcome::Proposal(o) => o.reports.iter().collect(),
            Outcome::Estimators(o) => o.reports.iter().collect(),
            Outcome::BiasDemo(o) => vec![&o.report],
            Outcome::Gradcheck(o) => vec![&o.report],
            Outcome::SinkhornBench(o) => vec![&o.report],
        }
    }
}

/// Runs an experiment in memory.
pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    cfg.validate()?;
    Ok(match experiment {
        Experiment::Table1 => Outcome::Table1(table1(cfg)?),
        Experiment::Proposal => Outcome::Proposal(proposal_learning(cfg)?),
        Experiment::Estimators => Outcome::Estimators(estimator_comparison(cfg)?),
        Experiment::BiasDemo => Outcome::BiasDemo(bias_demo(cfg)?),
        Experiment::Gradcheck => Outcome::Gradcheck(gradcheck(cfg)?),
        Experiment::SinkhornBench => Outcome::SinkhornBench(sinkhorn_bench(cfg)?),
    })
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub outcome: Outcome,
    pub files: Vec<PathBuf>,
    pub wall_time_s: f64,
}

/// Runs an experiment and writes its CSVs plus `<experiment>.run.toml`
/// (config hash, code version, wall time and the resolved config) into
/// `out`. A gradient check above its threshold is reported as a numerical
/// failure after the files are written.
pub fn run_to_dir(experiment: Experiment, cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, HarnessError> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
    let start = Instant::now();
    let outcome = run(experiment, cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let mut files = Vec::new();
    for r in outcome.reports() {
        files.push(r.write_to(out)?);
    }
    let meta_path = out.join(format!("{}.run.toml", experiment.name()));
    let mut meta = format!(
        "experiment = \"{}\"\nconfig_hash = \"{}\"\ncode_version = \"{}\"\nwall_time_s = {}\n\n",
        experiment.name(),
        cfg.hash(),
        env!("CARGO_PKG_VERSION"),
        wall_time_s
    );
    meta.push_str("[config]\n");
    let cfg_text = cfg.to_toml_string();
    // Nest the resolved config under [config] by prefixing its sections.
    for line in cfg_text.lines() {
        if let Some(section) = line.strip_prefix('[') {
            meta.push_str(&format!("[config.{section}\n"));
        } else {
            meta.push_str(line);
            meta.push('\n');
        }
    }
    std::fs::write(&meta_path, meta).map_err(|e| HarnessError::Io(format!("{}: {e}", meta_path.display())))?;
    files.push(meta_path);
    if let Outcome::Gradcheck(g) = &outcome {
        if g.max_error > cfg.gradcheck.threshold {
            return Err(HarnessError::Numerical(format!("gradient check error {:.3e} exceeds {:.1e}", g.max_error, cfg.gradcheck.threshold)));
        }
    }
    Ok(RunRecord { outcome, files, wall_time_s })
}
