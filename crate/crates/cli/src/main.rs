//! `dcis`: synthetic data, splits, patch extraction, training, evaluation
//! and multi-run reporting for the DCIS grading pipeline.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bad flags, bad config syntax or malformed values. Exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "dcis", version, about = "Ordinal DCIS grading pipeline")]
pub struct Cli {
    /// Random seed; every output is a pure function of inputs and seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML config file; keys are long flag names, optionally grouped in a
    /// table per subcommand. Flags override the file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic graded dataset with simulated observers.
    Synth(SynthArgs),
    /// Assign patients to train/validation/test, stratified by grade.
    Split(SplitArgs),
    /// Write random lesion patches to disk.
    Extract(ExtractArgs),
    /// Train the dual-head grading network.
    Train(TrainArgs),
    /// Predict the test split and compute agreement tables.
    Eval(EvalArgs),
    /// Aggregate evaluated runs into a mean/SD kappa table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of patients [default: 100].
    #[arg(long)]
    pub patients: Option<usize>,
    /// Lesions per patient as MIN,MAX [default: 3,7].
    #[arg(long, value_name = "MIN,MAX")]
    pub lesions_per_patient: Option<String>,
    /// Lesion share of grades 1,2,3 [default: 152/1001,645/1001,204/1001].
    #[arg(long, value_name = "G1,G2,G3")]
    pub grade_mix: Option<String>,
    /// Probability that an observer reports an adjacent grade [default: 0.2].
    #[arg(long)]
    pub error_rate: Option<f64>,
    /// Image resolution in µm/px [default: 0.88].
    #[arg(long)]
    pub mpp: Option<f64>,
    /// Lesion diameter range in pixels as MIN,MAX [default: 256,1024].
    #[arg(long, value_name = "MIN,MAX")]
    pub lesion_size: Option<String>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Input manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train,validation,test patient fractions [default: 40/109,19/109,50/109].
    #[arg(long, value_name = "TRAIN,VAL,TEST")]
    pub fractions: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct PatchArgs {
    /// Patch side in pixels; also the network input size [default: 512].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Extraction resolution in µm/px [default: 0.88].
    #[arg(long)]
    pub target_mpp: Option<f64>,
    /// Border added around each lesion box, in µm [default: 90].
    #[arg(long)]
    pub border_um: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Input manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Patches per lesion [default: 10].
    #[arg(long)]
    pub draws: Option<usize>,
    /// Only lesions of this subset (needs a split manifest).
    #[arg(long, value_enum)]
    pub subset: Option<SubsetArg>,
    #[command(flatten)]
    pub patch: PatchArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetArg {
    Train,
    Validation,
    Test,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureArg {
    SmallCnn,
    Densenet121,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split fractions TRAIN,VAL,TEST used when the manifest has no split
    /// or to override it [default: 40/109,19/109,50/109].
    #[arg(long, value_name = "TRAIN,VAL,TEST")]
    pub split: Option<String>,
    /// Train on consensus grades only (no agreement head loss).
    #[arg(long)]
    pub baseline: bool,
    /// Independent runs with seeds seed, seed+1, ... in run_1, run_2, ...
    #[arg(long)]
    pub runs: Option<usize>,
    /// Maximum epochs [default: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 12].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Lesions per grade in each balanced batch [default: 4].
    #[arg(long)]
    pub per_grade: Option<usize>,
    /// Sample batches uniformly instead of balancing grades.
    #[arg(long)]
    pub unbalanced: bool,
    /// SGD learning rate [default: 1e-4].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// SGD momentum [default: 0.95].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Epochs without validation improvement before stopping [default: 3].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight λ of the agreement-head loss [default: 1.0].
    #[arg(long)]
    pub agreement_weight: Option<f64>,
    /// Batches per epoch [default: one pass over the training lesions].
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    /// Disable training-time augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Backbone architecture [default: small-cnn].
    #[arg(long, value_enum)]
    pub architecture: Option<ArchitectureArg>,
    /// Conv block widths [default: 16,32,64,64,64].
    #[arg(long, value_name = "W1,W2,...")]
    pub widths: Option<String>,
    /// Dense trunk units [default: 64].
    #[arg(long)]
    pub trunk_units: Option<usize>,
    /// Initialize from the weights of a checkpoint.
    #[arg(long, value_name = "PATH")]
    pub pretrained_weights: Option<PathBuf>,
    /// Patches per lesion for validation predictions [default: 10].
    #[arg(long)]
    pub n_patches: Option<usize>,
    #[command(flatten)]
    pub patch: PatchArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelArg {
    Lesion,
    Patient,
    Both,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory produced by `train` (repeatable).
    #[arg(long = "run", value_name = "DIR", required = true)]
    pub runs: Vec<PathBuf>,
    /// Agreement level(s) to report [default: both].
    #[arg(long, value_enum)]
    pub level: Option<LevelArg>,
    /// Manifest to evaluate [default: the run's manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// CSV `lesion_id,true_grade` [default: truth.csv beside the source data, if any].
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// Patches per lesion [default: 10].
    #[arg(long)]
    pub n_patches: Option<usize>,
    /// Percentiles tried on the validation split [default: 50,55,...,100].
    #[arg(long, value_name = "P1,P2,...")]
    pub percentile_grid: Option<String>,
    /// Confidence level of the kappa intervals [default: 0.95].
    #[arg(long)]
    pub confidence: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluated run directory (repeatable).
    #[arg(long = "run", value_name = "DIR", required = true)]
    pub runs: Vec<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dcis_core::Error>() {
            return if e.is_data_error() { 2 } else { 3 };
        }
    }
    3
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
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
