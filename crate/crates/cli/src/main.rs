mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmrl_core::Task;

/// Train and evaluate causal pair models on graph-pair datasets.
#[derive(Debug, Parser)]
#[command(name = "cmrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the biased motif/base synthetic benchmark.
    GenSynthetic(GenArgs),
    /// Train one model on a random or scaffold split.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(EvalArgs),
    /// Repeated k-fold cross-validation.
    Cv(CvArgs),
    /// Write the scaffold out-of-distribution split of a dataset.
    OodSplit(OodArgs),
    /// Train full and no-causal models across bias levels.
    BiasSweep(SweepArgs),
    /// Finite-difference check of the training objective on a toy batch.
    Gradcheck(GradArgs),
    /// Summarize the outputs of a finished command.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Synthetic generator settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training settings (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<Task>,
    /// Use the scaffold split with this many in-distribution classes.
    #[arg(long)]
    scaffold_c: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; metrics go to stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write atom importances and interaction maps to the output directory.
    #[arg(long, requires = "out")]
    dump: bool,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct OodArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output split file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scaffold_c: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated bias levels.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// First seed; seeds are consecutive.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds per level.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Debug, Args)]
struct GradArgs {
    /// Check only this task.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of a finished command.
    #[arg(long)]
    out: PathBuf,
}

/// How a command failed: bad input (exit 2) or a failure while working (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (kind, err, code) = match self {
            Failure::Usage(e) => ("usage", e, 2),
            Failure::Runtime(e) => ("runtime", e, 1),
        };
        let message = format!("{err:#}").replace('\n', " ");
        eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
        ExitCode::from(code)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CMRL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("CMRL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return Failure::Usage(anyhow::anyhow!(first)).report();
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cv(a) => commands::cv(a),
        Command::OodSplit(a) => commands::ood_split(a),
        Command::BiasSweep(a) => commands::bias_sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
