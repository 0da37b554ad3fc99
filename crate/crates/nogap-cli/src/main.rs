use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nogap_core::NogapError;

mod commands;
mod config;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "nogap",
    version,
    about = "Gaussian-process regression with a wavelet-neural-operator mean on PDE benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test dataset pair and a hash manifest.
    Generate(RunArgs),
    /// Fit a model variant on the generated training split.
    Train(RunArgs),
    /// Write posterior mean/std for the test split.
    Predict(RunArgs),
    /// Score a trained model on the test split and emit plot data.
    Evaluate(RunArgs),
    /// Aggregate evaluation reports under a directory into tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the model variant: nogap | wno_only | gp_zero_mean.
    #[arg(long)]
    variant: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow overwriting existing datasets (generate).
    #[arg(long)]
    force: bool,
    /// Add observation noise to predictive variances (predict/evaluate).
    #[arg(long)]
    include_noise: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory to scan recursively for eval.kv files.
    #[arg(long)]
    out: PathBuf,
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, NogapError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(variant) = &args.variant {
        config.variant = variant.clone();
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), NogapError> {
    match &cli.command {
        Command::Generate(args) => commands::generate(&load(args)?, args.force),
        Command::Train(args) => commands::train(&load(args)?),
        Command::Predict(args) => commands::predict(&load(args)?, args.include_noise),
        Command::Evaluate(args) => commands::evaluate(&load(args)?, args.include_noise),
        Command::Report(args) => commands::report(&args.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                NogapError::Numeric { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
