//! `saeda` command-line runner: generate data, train, evaluate, plot and
//! diagnose paired auto-encoder domain adaptation runs.

mod commands;
mod config;
mod draw;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saeda::pipeline::{CwsGradient, Stage};
use saeda::Task;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "saeda", version, about = "Class-wise MMD auto-encoder domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the three dataset splits and the hidden ground truth.
    Generate(RunArgs),
    /// Run the staged training procedure and predict the unlabeled split.
    Train(TrainArgs),
    /// Score a trained model against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a confusion matrix or an embedding scatter to PNG.
    Plot(PlotArgs),
    /// Measure class alignment before and after auto-encoder training.
    Diagnose(DiagnoseArgs),
}

/// Options shared by every config-driven command.
#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (JSON). The bundled default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// `classification` or `regression`; without `--config` this also picks the bundled config.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Weight of the class-wise MMD term.
    #[arg(long)]
    beta: Option<f64>,
    /// Start at this stage (`stage2` or `stage3`) from saved checkpoints.
    #[arg(long, value_parser = parse_stage)]
    resume: Option<Stage>,
    /// Which encoders the alignment gradient reaches: `both` or `target-only`.
    #[arg(long, value_parser = parse_cws_grad)]
    cws_grad: Option<CwsGradient>,
    /// Skip target fine-tuning.
    #[arg(long)]
    skip_stage3: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory to predict (normally the unlabeled target split).
    #[arg(long)]
    dataset: PathBuf,
    /// `truth.json` written by `generate`.
    #[arg(long)]
    truth: PathBuf,
    /// Labeled source split; with `--target-labeled` enables the alignment metrics.
    #[arg(long, requires = "target_labeled")]
    source: Option<PathBuf>,
    /// Labeled target split paired with `--source`.
    #[arg(long, requires = "source")]
    target_labeled: Option<PathBuf>,
    /// Directory for the report files.
    #[arg(long, default_value = ".")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// `report.json`, `confusion.csv` or `embedding.csv`.
    #[arg(long)]
    input: PathBuf,
    /// PNG file to write.
    #[arg(long)]
    output: PathBuf,
    /// Ground truth supplying class names for the legend.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Weight of the class-wise MMD term.
    #[arg(long)]
    beta: Option<f64>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: saeda::Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: saeda::Error| e.to_string())
}

fn parse_cws_grad(s: &str) -> Result<CwsGradient, String> {
    s.parse().map_err(|e: saeda::Error| e.to_string())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SAEDA_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| CliError::Usage(format!("SAEDA_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate(args) => commands::generate::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Evaluate(args) => commands::evaluate::run(&args),
        Command::Plot(args) => commands::plot::run(&args),
        Command::Diagnose(args) => commands::diagnose::run(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
