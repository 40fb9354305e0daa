//! Command-line entry points: synthetic data, training, fine-tuning,
//! forecasting, evaluation, gradient checking and ablations.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sundial", version, about = "Generative time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a corpus of synthetic Gaussian-process series.
    Synth(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint with a fresh optimizer.
    Finetune(FinetuneArgs),
    /// Forecast the continuation of every series in a context file.
    Forecast(ForecastArgs),
    /// Score forecasts of each series' final points.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate a model with one switch flipped.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the run manifest (default: next to the output).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub length: usize,
    #[arg(long, default_value_t = 5)]
    pub max_kernels: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Objective {
    Timeflow,
    Mse,
    Diffusion,
}

impl From<Objective> for sundial::backbone::HeadKind {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Timeflow => Self::TimeFlow,
            Objective::Mse => Self::Mse,
            Objective::Diffusion => Self::Diffusion,
        }
    }
}

/// Training knobs shared by `train`, `finetune` and `ablate`.
#[derive(Args, Debug, Clone)]
pub struct Optim {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub min_context: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    /// JSON file with a complete training configuration; flags override it.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Write `step,loss,smoothed` for external plotting.
    #[arg(long)]
    pub emit_curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Preset name (tiny, toy, small, base, large) or JSON model config file.
    #[arg(long, default_value = "toy")]
    pub config: String,
    #[arg(long, value_enum)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[command(flatten)]
    pub optim: Optim,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Architecture the checkpoint must have (preset or JSON file).
    #[arg(long)]
    pub expect_config: Option<String>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[command(flatten)]
    pub optim: Optim,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Sampling {
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    /// Sampling steps per generated window.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Comma-separated quantile levels.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub levels: String,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus file, or a plain list of numbers forming one series.
    #[arg(long)]
    pub context_file: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    #[command(flatten)]
    pub sampling: Sampling,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    #[command(flatten)]
    pub sampling: Sampling,
    #[arg(long, default_value = "mse,mae,mase,wql,crps")]
    pub metrics: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check the tiny configuration (the default).
    #[arg(long)]
    pub config_tiny: bool,
    /// Check this preset or JSON model config instead.
    #[arg(long, conflicts_with = "config_tiny")]
    pub config: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// JSON report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Toggle {
    Rope,
    #[value(name = "pre_ln")]
    PreLn,
    #[value(name = "kv_cache")]
    KvCache,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub toggle: Toggle,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out series (default: the training corpus).
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    pub config: String,
    /// Forecast horizon for evaluation (default: the model horizon).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 50)]
    pub sample_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: Optim,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // usage errors exit with 2, help and version with 0
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
