//! Command-line front end for the experiment harness.
//!
//! Exit status: 0 on success, 2 for configuration or usage errors, 3 for
//! numerical failures (including a gradient check above its threshold).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dpf_core::harness::{self, Experiment, ExperimentConfig, HarnessError, Outcome};

#[derive(Debug, Parser)]
#[command(name = "dpf", version, about = "Run differentiable particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file; missing keys come from its preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSVs and the run metadata file.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `section.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// ELBO table for PF and DPF on the 2-D linear-Gaussian model.
    Table1,
    /// Proposal learning on the banded model.
    Proposal,
    /// PF, DPF and SMLE parameter estimation against the exact MLE.
    Estimators,
    /// Bias of the resampling-blind gradient.
    Biasdemo,
    /// DPF gradient against finite differences.
    Gradcheck,
    /// Sinkhorn iteration counts.
    SinkhornBench,
}

impl Command {
    fn experiment(&self) -> Experiment {
        match self {
            Command::Table1 => Experiment::Table1,
            Command::Proposal => Experiment::Proposal,
            Command::Estimators => Experiment::Estimators,
            Command::Biasdemo => Experiment::BiasDemo,
            Command::Gradcheck => Experiment::Gradcheck,
            Command::SinkhornBench => Experiment::SinkhornBench,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_toml_with_overrides("", &overrides),
    }
}

fn report(outcome: &Outcome) {
    match outcome {
        Outcome::Gradcheck(g) => println!("max relative error {:.3e}", g.max_error),
        Outcome::SinkhornBench(b) => {
            for c in &b.cells {
                println!("n={} epsilon={} instances={} {:.3} ms/solve", c.n, c.epsilon, c.iterations.len(), 1e3 * c.seconds / c.iterations.len() as f64);
            }
        }
        _ => {}
    }
}

/// Parses `args` (including the program name), runs the experiment and
/// returns the process exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = load(&cli).and_then(|cfg| harness::run_to_dir(cli.command.experiment(), &cfg, &cli.out));
    match result {
        Ok(rec) => {
            report(&rec.outcome);
            for f in &rec.files {
                println!("wrote {}", f.display());
            }
            println!("wall time {:.1} s", rec.wall_time_s);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
