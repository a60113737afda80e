//! Command-line front end: seeded, reproducible experiment suites.

use clap::{Parser, Subcommand};
use mvflow::config::ExperimentConfig;
use mvflow::harness::{run_experiment, RunSummary};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mvflow",
    about = "Interacting stochastic flows on embedded manifolds: simulation, calculus checks and chaos-kernel estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (flat JSON; unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for resolved-config.json, records.csv, report.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the interacting system; write checkpoints and trajectories.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override the replica count.
        #[arg(long)]
        replicas: Option<usize>,
    },
    /// Run the derivative-oracle suite (FD ladders, identities, residuals).
    CheckCalculus {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate chaos kernels by all applicable methods.
    KvKernels {
        #[command(flatten)]
        common: Common,
        /// Kernel order (1 or 2).
        #[arg(long, default_value_t = 1)]
        order: usize,
    },
    /// Variance budget of the chaos expansion plus mixed-index projections.
    KvDiagnostics {
        #[command(flatten)]
        common: Common,
    },
    /// Common-noise perturbation growth of the measure flow.
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// Strong self-convergence order on a dyadic step ladder.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
    /// Frozen-measure fixed-point iteration against the coupled solver.
    Picard {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, suites: Vec<String>) -> Result<ExperimentConfig, mvflow::Error> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.suites = suites;
    Ok(cfg)
}

fn finish(summary: RunSummary, out: &std::path::Path) -> ExitCode {
    println!(
        "{} records, {} failures -> {}",
        summary.records.len(),
        summary.failures,
        out.display()
    );
    if summary.failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn run() -> Result<ExitCode, mvflow::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common, replicas } => {
            let mut cfg = load(&common, vec!["simulate".into()])?;
            if let Some(r) = replicas {
                cfg.budgets.replicas = r;
            }
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
        Command::CheckCalculus { common } => {
            let cfg = load(&common, vec!["check-calculus".into()])?;
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
        Command::KvKernels { common, order } => {
            let suite = match order {
                1 => "kv-kernels",
                2 => "kv-kernels-2",
                _ => {
                    return Err(mvflow::Error::ConfigInvalid(format!(
                        "kernel order must be 1 or 2, got {order}"
                    )))
                }
            };
            let cfg = load(&common, vec![suite.into()])?;
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
        Command::KvDiagnostics { common } => {
            let cfg = load(&common, vec!["kv-diagnostics".into()])?;
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
        Command::Stability { common } => {
            let cfg = load(&common, vec!["stability".into()])?;
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
        Command::Convergence { common } => {
            let cfg = load(&common, vec!["convergence".into()])?;
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
        Command::Picard { common } => {
            let cfg = load(&common, vec!["picard".into()])?;
            Ok(finish(run_experiment(&cfg, &common.out)?, &common.out))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
