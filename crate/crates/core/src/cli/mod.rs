//! The `bml` command line: train, evaluate, ablate, rank, export embeddings
//! and write synthetic datasets.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{apply_override, resolve_run_root, DataConfig, EvalConfig, RunConfig, RUN_ROOT_ENV};

use crate::data::{DegradationPreset, SplitRole};
use crate::error::BmlError;
use crate::evaluator::Fusion;

#[derive(Debug, Parser)]
#[command(name = "bml", version, about = "Binocular mutual learning for few-shot classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Meta-test a checkpoint on all three branches.
    Eval(EvalArgs),
    /// Train and evaluate a grid along one axis on shared seeds.
    Ablate(AblateArgs),
    /// Rank the classes of one seeded episode for every query.
    Rank(RankArgs),
    /// Write both heads' flattened embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Write a synthetic dataset as PNG files plus a manifest.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set losses.elastic.enabled=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub name: Option<String>,
    /// Parent of run directories [default: $BML_RUN_ROOT or ./runs].
    #[arg(long)]
    pub run_root: Option<PathBuf>,
    /// Continue from `checkpoints/last.ckpt` of an existing run.
    #[arg(long)]
    pub resume: bool,
    /// Resume even if the config differs from the checkpoint's.
    #[arg(long, requires = "resume")]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Dataset source [default: the run's config.snapshot].
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub split: Option<SplitRole>,
    /// Number of episodes.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Degradation preset: resize, blur, pepper or jitter. Repeatable.
    #[arg(long)]
    pub degrade: Vec<DegradationPreset>,
    /// `sum` or `softmax_sum`.
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Output directory [default: the run's reports/].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Mutual,
    Elastic,
    SharedDepth,
    Mode,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Mutual => "mutual",
            Axis::Elastic => "elastic",
            Axis::SharedDepth => "shared_depth",
            Axis::Mode => "mode",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value = "novel")]
    pub split: SplitRole,
    #[arg(long, default_value_t = 4)]
    pub way: usize,
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    #[arg(long, default_value_t = 1)]
    pub query: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sum")]
    pub fusion: Fusion,
    /// Text report path [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value = "novel")]
    pub split: SplitRole,
    #[arg(long, default_value_t = 20)]
    pub max_per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_split(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('/')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected base/val/novel, e.g. 16/8/8".to_string())
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Class counts as base/val/novel.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[usize; 3]>,
    /// Within-class variation.
    #[arg(long, default_value_t = 1.0)]
    pub var: f32,
}

/// 2 for user, config and input errors, 3 for divergence, 1 otherwise.
pub fn exit_code(err: &BmlError) -> i32 {
    match err {
        BmlError::Diverged(_) | BmlError::NonFinite(_) => 3,
        BmlError::Io(_) | BmlError::Json(_) => 1,
        BmlError::InvalidArgument(_)
        | BmlError::ShapeMismatch(_)
        | BmlError::Dataset(_)
        | BmlError::TooFewClasses { .. }
        | BmlError::TooFewImages { .. }
        | BmlError::LabelOutOfRange { .. }
        | BmlError::Checkpoint(_)
        | BmlError::Config(_)
        | BmlError::Image { .. } => 2,
    }
}

pub fn execute(command: &Command) -> crate::Result<()> {
    match command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Rank(a) => commands::rank(a),
        Command::ExportEmbeddings(a) => commands::export(a),
        Command::MakeSynthetic(a) => commands::make_synthetic(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
