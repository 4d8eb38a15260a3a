//! `gridpp`: generate synthetic data, estimate bias, train and apply
//! correctors, and write verification tables.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gridpp", version, about = "Post-processing and verification of gridded forecasts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic analysis/forecast scenario as field files.
    Generate(GenerateArgs),
    /// Compute decay-weighted bias fields and the streaming bias state.
    Bias(BiasArgs),
    /// Fit the pointwise neural corrector.
    Train(TrainArgs),
    /// Apply a corrector to forecasts.
    Postprocess(PostprocessArgs),
    /// Score forecasts per lead time (RMSE, ACC, FSS, CLSDS).
    Evaluate(EvaluateArgs),
    /// Paired comparison of two runs with significance levels.
    Skillcard(SkillcardArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Global,
    Latw,
    Triregion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    Mae,
    Logcosh,
    Cossim,
    Fss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Nn,
    Linear,
    Decay,
    Blur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Rmse,
    Acc,
}

/// Options shared by every command that reads a dataset.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory holding `analysis/` and `forecast/` series.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Feature manifest the dataset must match.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scenario file (JSON); defaults to the built-in desk scenario.
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Decay constant.
    #[arg(long, default_value_t = gridpp_core::predictors::DEFAULT_DECAY_W)]
    pub w: f64,
    /// Number of lags in the windowed bias.
    #[arg(long, default_value_t = gridpp_core::predictors::DEFAULT_LAGS)]
    pub lags: usize,
    /// Existing bias state to continue from; only newer errors are ingested.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RegimeArg::Global)]
    pub regime: RegimeArg,
    #[arg(long, value_enum, default_value_t = LossArg::Mse)]
    pub loss: LossArg,
    #[arg(long = "lat-weighted", value_enum, default_value_t = Switch::Off)]
    pub lat_weighted: Switch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long = "learning-rate", default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Mini-batch tile side; 0 trains on whole fields.
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 128, 256])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = gridpp_core::predictors::DEFAULT_DECAY_W)]
    pub w: f64,
    /// Only forecasts valid at or before this time are used for fitting.
    #[arg(long, value_name = "ISO8601")]
    pub until: Option<DateTime<Utc>>,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Model checkpoint written by `train` (method nn).
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Blur width for the blur baseline.
    #[arg(long, default_value_t = gridpp_core::baselines::DEFAULT_BLUR_SIGMA)]
    pub sigma: f64,
    #[arg(long, default_value_t = gridpp_core::predictors::DEFAULT_DECAY_W)]
    pub w: f64,
    /// Fitting period end for the linear model.
    #[arg(long, value_name = "ISO8601")]
    pub until: Option<DateTime<Utc>>,
    /// Only write forecasts valid at or after this time.
    #[arg(long, value_name = "ISO8601")]
    pub from: Option<DateTime<Utc>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of candidate forecasts.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Directory of verifying analyses.
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long = "lat-weighted", value_enum, default_value_t = Switch::On)]
    pub lat_weighted: Switch,
    /// Reference blur width that calibrates CLSDS to 1.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Optional radial power spectra CSV (mean over times) of the candidates.
    #[arg(long, value_name = "FILE")]
    pub spectra: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SkillcardArgs {
    /// Candidate run directory.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Baseline run directory.
    #[arg(long, value_name = "DIR")]
    pub baseline: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Rmse)]
    pub metric: MetricArg,
    #[arg(long = "lat-weighted", value_enum, default_value_t = Switch::On)]
    pub lat_weighted: Switch,
    /// Also write the card as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("GRIDPP_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        gridpp_core::par::init_threads(n);
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Bias(a) => commands::bias(&a),
        Command::Train(a) => commands::train(&a),
        Command::Postprocess(a) => commands::postprocess(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Skillcard(a) => commands::skillcard(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
