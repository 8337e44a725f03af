//! `atebench`: fit a generating distribution to study data, simulate from
//! it, and benchmark ATE estimators on the simulated replicates.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use atebench::harness::ScenarioKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "atebench", version, about = "Realistic-simulation benchmarking of ATE estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replicates.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads (default: ATEBENCH_WORKERS, else 1).
    #[arg(long)]
    workers: Option<usize>,
    /// from_dgd, randomized_rct or positivity_stress.
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the HAL generating distribution to the configured dataset.
    FitDgd {
        #[command(flatten)]
        common: Common,
    },
    /// Write sampled replicate datasets as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the ATE on a real dataset.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Dataset path; overrides `[data].path`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the Monte-Carlo benchmark and write the metrics report.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
    /// Re-aggregate saved replicate results.
    Report {
        #[command(flatten)]
        common: Common,
        /// Saved replicates (default `<out>/replicates.json`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn prepare(common: &Common) -> Result<(RunConfig, commands::Context), CliError> {
    prepare_with_data(common, None)
}

fn prepare_with_data(common: &Common, data: Option<PathBuf>) -> Result<(RunConfig, commands::Context), CliError> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    let mut overrides = config.apply(&Overrides {
        seed: common.seed,
        reps: common.reps,
        workers: common.workers,
        scenario: common.scenario,
        out: common.out.clone(),
    })?;
    if let Some(path) = data {
        match config.data.as_mut() {
            Some(section) => section.path = path.clone(),
            None => return Err(CliError::Validation("--data needs a [data] section with column specs".into())),
        }
        overrides.insert("data".into(), path.display().to_string());
    }
    config.validate()?;
    let ctx = commands::Context { overrides, hash: config.hash() };
    Ok((config, ctx))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FitDgd { common } => {
            let (config, ctx) = prepare(&common)?;
            commands::fit_dgd(&config, &ctx)
        }
        Command::Simulate { common } => {
            let (config, ctx) = prepare(&common)?;
            commands::simulate(&config, &ctx)
        }
        Command::Estimate { common, data } => {
            let (config, ctx) = prepare_with_data(&common, data)?;
            commands::estimate(&config, &ctx)
        }
        Command::Benchmark { common } => {
            let (config, ctx) = prepare(&common)?;
            commands::benchmark(&config, &ctx)
        }
        Command::Report { common, input } => {
            let (config, ctx) = prepare(&common)?;
            commands::report(&config, &ctx, input)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atebench: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
