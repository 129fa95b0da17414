//! `pixdefer` command-line front end.
//!
//! Exit codes: 0 ok, 2 input error, 3 invariant violation, 4 infeasible fit.

mod commands;
mod load;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pixdefer::calibration::AccuracyMode;
use pixdefer::deferral::{Criterion, Policy};
use pixdefer::maps::{SourceTag, UncertaintyKind};
use pixdefer::report::AucMode;

#[derive(Parser, Debug)]
#[command(name = "pixdefer", version, about = "Pixel-level deferral: aggregate, calibrate, fit, defer, evaluate")]
pub struct Cli {
    /// Seed for bootstrap resampling and synthetic data [default: 0, or
    /// the seed of a given config file].
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; outputs are bitwise identical for any count.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,

    /// Format of the summary written to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mc,
    Tta,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Reduce prediction stacks to a mean map and uncertainty maps.
    Aggregate(AggregateArgs),
    /// Fit or apply temperature scaling.
    #[command(subcommand)]
    Calibrate(CalibrateCmd),
    /// Fit a deferral threshold on a validation set.
    Fit(FitArgs),
    /// Apply a fitted deferral model to one image.
    Defer(DeferArgs),
    /// Compute the full metric report for a dataset.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset with planted errors and uncertainty.
    Synth(SynthArgs),
}

/// Where per-image maps come from: a dataset directory with a manifest, or
/// explicit file lists paired by position.
#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Dataset directory containing manifest.json; stacks are aggregated on the fly.
    #[arg(long, conflicts_with_all = ["mean", "unc", "gt"])]
    pub data: Option<PathBuf>,

    /// Mean probability maps (.npy).
    #[arg(long, num_args = 1..)]
    pub mean: Vec<PathBuf>,

    /// Uncertainty maps (.npy), one per mean map.
    #[arg(long, num_args = 1..)]
    pub unc: Vec<PathBuf>,

    /// Ground-truth masks (uint8 .npy), one per mean map.
    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,

    /// Uncertainty kind of the maps (mi, variance, entropy). Defaults to
    /// mutual information for dropout stacks and variance for TTA.
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<UncertaintyKind>,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    /// Stack files (.npy with optional .json sidecar).
    #[arg(long, num_args = 1.., conflicts_with = "data", required_unless_present = "data")]
    pub stack: Vec<PathBuf>,

    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Defaults to tta for stacks tagged tta and mc otherwise.
    #[arg(long, value_enum)]
    pub method: Option<Method>,

    /// Uncertainty maps to write (comma separated). Defaults to mi for mc and
    /// variance,entropy for tta.
    #[arg(long = "unc-kind", value_delimiter = ',', value_parser = parse_kind)]
    pub unc_kind: Vec<UncertaintyKind>,

    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum CalibrateCmd {
    /// Fit a temperature on held-out logits.
    Fit(CalibrateFitArgs),
    /// Rescale a probability or logit map with a fitted temperature.
    Apply(CalibrateApplyArgs),
}

#[derive(Args, Debug)]
pub struct CalibrateFitArgs {
    /// Dataset directory whose manifest lists logits files.
    #[arg(long, conflicts_with_all = ["logits", "gt"])]
    pub data: Option<PathBuf>,

    #[arg(long, num_args = 1..)]
    pub logits: Vec<PathBuf>,

    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,

    /// Where to write the temperature model JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateApplyArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Probability map to rescale.
    #[arg(long, conflicts_with = "logits", required_unless_present = "logits")]
    pub input: Option<PathBuf>,

    /// Logit map to rescale.
    #[arg(long)]
    pub logits: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    #[arg(long, value_parser = parse_snake::<Policy>)]
    pub policy: Policy,

    #[arg(long, value_parser = parse_snake::<Criterion>, default_value = "max_f1")]
    pub criterion: Criterion,

    /// Minimum accepted-pixel Dice for coverage_dice (default 0.82).
    #[arg(long)]
    pub dice_floor: Option<f64>,

    /// Where to write the model JSON.
    #[arg(long)]
    pub out: PathBuf,

    /// Optional CSV with every swept candidate.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DeferArgs {
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long)]
    pub mean: PathBuf,

    #[arg(long)]
    pub unc: PathBuf,

    #[arg(long, value_parser = parse_kind, default_value = "mi")]
    pub kind: UncertaintyKind,

    /// Decision map output (uint8 .npy, 1 = accept).
    #[arg(long)]
    pub out: PathBuf,

    /// Also write the decision map as a PGM image.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    /// Fitted deferral model; without it no deferral metrics are reported.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Evaluation config JSON; command-line flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Method label recorded in the report.
    #[arg(long)]
    pub method: Option<String>,

    #[arg(long)]
    pub ece_bins: Option<usize>,

    #[arg(long, value_parser = parse_snake::<AccuracyMode>)]
    pub accuracy_mode: Option<AccuracyMode>,

    #[arg(long, value_parser = parse_snake::<AucMode>)]
    pub auc: Option<AucMode>,

    /// Bootstrap resamples for per-image confidence intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,

    #[arg(long)]
    pub bootstrap_level: Option<f64>,

    #[arg(long)]
    pub out_dir: PathBuf,

    /// Write uncertainty and decision maps as PGM images.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator spec JSON; when given the flags below are ignored.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, default_value_t = 64)]
    pub height: usize,

    #[arg(long, default_value_t = 64)]
    pub width: usize,

    #[arg(long, default_value_t = 4)]
    pub n_images: usize,

    #[arg(long, default_value_t = 0.05)]
    pub error_rate: f64,

    /// Rank agreement between uncertainty and errors, in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    pub corr: f64,

    #[arg(long, default_value_t = 10)]
    pub passes: usize,

    #[arg(long, value_parser = parse_snake::<SourceTag>, default_value = "mc_dropout")]
    pub source: SourceTag,

    #[arg(long, value_enum, default_value_t = Calibration::Calibrated)]
    pub calibration: Calibration,

    /// Planted temperature for over/underconfident fixtures.
    #[arg(long)]
    pub t_plant: Option<f64>,

    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Calibration {
    Calibrated,
    Overconfident,
    Underconfident,
}

fn parse_kind(s: &str) -> Result<UncertaintyKind, String> {
    s.parse().map_err(|e: pixdefer::Error| e.to_string())
}

/// Parses a snake_case enum name through its serde representation.
fn parse_snake<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Maps an error to the process exit code.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<pixdefer::Error>() {
            return match err {
                pixdefer::Error::Infeasible { .. } => 4,
                err if err.is_invariant_violation() => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads as usize)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
