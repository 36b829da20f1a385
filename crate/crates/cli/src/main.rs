//! `stepcount` command-line driver.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stepcount_core::baselines::BaselineMethod;
use stepcount_core::eval::Scheme;
use stepcount_core::pipeline::InputMode;

#[derive(Parser, Debug)]
#[command(
    name = "stepcount",
    version,
    about = "Attention-LSTM step counting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic walking dataset.
    Synth(SynthArgs),
    /// Print step-count label statistics of a dataset.
    Stats(StatsArgs),
    /// Convert a staged public dataset into the canonical layout.
    Convert(ConvertArgs),
    /// Train one model on a whole dataset and save a checkpoint.
    Train(TrainCmdArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cross-validate a model configuration.
    Crossval(CrossvalArgs),
    /// Run the classical step counters on a dataset.
    Baseline(BaselineArgs),
    /// Write per-timestep attention scores and weights for one sample.
    ExportAttention(ExportArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Family {
    Noisy,
    Clean,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of walks.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Family::Noisy)]
    family: Family,
    /// Dataset name recorded in the manifest.
    #[arg(long, default_value = "synthetic")]
    name: String,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Manifest path, dataset directory, or dataset name under $STEPCOUNT_DATA_DIR.
    #[arg(long)]
    dataset: String,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Dataset name (wdsc, weallwalk and pedometer get their labels checked).
    #[arg(long)]
    name: String,
    /// Staging directory holding index.csv and the recordings.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_parser = parse_input, default_value = "l2")]
    input: InputMode,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Use the attention layer (default).
    #[arg(long, overrides_with = "no_attention")]
    attention: bool,
    /// Replace the attention context with the last hidden state.
    #[arg(long = "no-attention")]
    no_attention: bool,
    /// Decimation factor, or `auto` for the integer nearest fs/25 Hz.
    #[arg(long, default_value = "auto")]
    downsample: String,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Epochs between tenfold learning-rate drops.
    #[arg(long, default_value_t = 75)]
    lr_step: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone, Copy)]
struct MetricArgs {
    /// Normalize UC/OC by sample count instead of total steps.
    #[arg(long)]
    uc_oc_by_samples: bool,
    /// Round predictions to integers before scoring.
    #[arg(long)]
    round: bool,
}

#[derive(Args, Debug)]
struct TrainCmdArgs {
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, value_parser = parse_scheme, default_value = "kfold5")]
    scheme: Scheme,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    dataset: String,
    /// peaks, threshold, autocorr, or all.
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long, default_value = "auto")]
    downsample: String,
    #[arg(long, default_value_t = 0.25)]
    smooth_window: f64,
    /// Threshold in standard deviations above the mean.
    #[arg(long, default_value_t = 0.5)]
    k: f64,
    #[arg(long, default_value_t = 0.33)]
    min_interval: f64,
    #[arg(long, default_value_t = 0.6)]
    band_lo: f64,
    #[arg(long, default_value_t = 3.0)]
    band_hi: f64,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Sample id.
    #[arg(long)]
    sample: String,
    /// CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_input(s: &str) -> Result<InputMode, String> {
    s.parse().map_err(|e: stepcount_core::Error| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: stepcount_core::Error| e.to_string())
}

fn parse_methods(s: &str) -> Result<Vec<BaselineMethod>, String> {
    if s == "all" {
        return Ok(BaselineMethod::ALL.to_vec());
    }
    s.split(',')
        .map(|m| {
            m.trim()
                .parse()
                .map_err(|e: stepcount_core::Error| e.to_string())
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
