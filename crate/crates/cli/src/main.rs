//! `wavray`: train, evaluate, verify and inspect wavelet/ray classifiers.
//!
//! Exit codes: 0 success, 1 usage, config or data error, 2 training
//! divergence, 3 verification failure. Progress goes to standard error and
//! results to standard output.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavray::TensorError;

#[derive(Debug, Parser)]
#[command(name = "wavray", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier on a manifest dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a checkpoint's attenuation maps as PGM images.
    ExportMaps(ExportArgs),
    /// Print parameter counts per module.
    ParamCount(ParamCountArgs),
    /// Generate a synthetic shape dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ray layers to enable (0 to 3).
    #[arg(long)]
    rays: Option<usize>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset manifest (`path,label` CSV).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for logs, checkpoints and trajectories.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluation batch size; results do not depend on it.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// op, block or model.
    #[arg(long, default_value = "op")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM or PPM image run through the model.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ray layer index in forward order.
    #[arg(long, default_value_t = 0)]
    layer: usize,
}

#[derive(Debug, Args)]
struct ParamCountArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Count the full-size configuration and compare with its reference totals.
    #[arg(long)]
    table1: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    extent: usize,
    /// center or uniform.
    #[arg(long, default_value = "center")]
    placement: String,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Error(TensorError),
    Diverged(TensorError),
    Verification(String),
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Diverged { .. } => Failure::Diverged(e),
            other => Failure::Error(other),
        }
    }
}

impl Failure {
    fn report(&self) -> ExitCode {
        match self {
            Failure::Error(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
            Failure::Diverged(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            Failure::Verification(m) => {
                eprintln!("verification failed: {m}");
                ExitCode::from(3)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::ExportMaps(a) => commands::export_maps(&a),
        Command::ParamCount(a) => commands::param_count(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
