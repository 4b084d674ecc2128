use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;

use pept_cli::{run, CliError, ExperimentConfig, Overrides};

/// Closed-loop benchmark of RTI, PT, CLC, PEPT and policy-only controllers on
/// the quadcopter tracking task.
#[derive(Debug, Parser)]
#[command(name = "pept", version)]
struct Args {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `easy` or `hard`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Seed of the first episode.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Policy weight file.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Comma-separated controller identifiers, e.g. `RTI-40,PEPT-10-20-2`.
    #[arg(long, value_delimiter = ',')]
    controllers: Option<Vec<String>>,
}

fn execute(args: Args) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(Overrides {
        task: args.task,
        episodes: args.episodes,
        seed: args.seed,
        out: args.out,
        weights: args.weights,
        controllers: args.controllers,
    });
    let output = run(&cfg)?;
    for s in &output.summaries {
        println!(
            "{:<16} tracking {:.4}  J_v {:.4}  runtime {:.2} ms  feedback {:.2} ms  failures {:.2}%",
            s.controller,
            s.tracking_cost.0,
            s.violation_cost.0,
            s.runtime_ms.0,
            s.feedback_ms.0,
            s.failure_pct
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
