// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `cuetrace` command line: corpus generation and ingestion, training,
//! evaluation, attribution and patching sweeps, reporting and replay.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cuetrace::attribution::Method;
use cuetrace::model::Mode;

pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use stages::Plan;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cuetrace::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cuetrace", version, about = "Train toy transformers and trace which gender cues they use")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Worker threads for training and analysis (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus.
    Gen(GenArgs),
    /// Annotate raw biographies (plain text or JSON lines).
    Ingest(IngestArgs),
    /// Balance by cue count and split into train and test.
    Split(SplitArgs),
    /// Pre-train a model from scratch.
    Train(TrainArgs),
    /// Prompt-fine-tune a pre-trained model.
    Finetune(FinetuneArgs),
    /// Measure target-prediction accuracy.
    Eval(EvalArgs),
    /// Score cue reliance with one attribution method.
    Analyze(AnalyzeArgs),
    /// Aggregate analysis runs into CSV tables and SVG plots.
    Report(ReportArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct ResourceArgs {
    /// Cue lexicon JSON (default: built-in).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Name substitution table JSON (default: built-in).
    #[arg(long)]
    pub names: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inclusive cue-count range, e.g. `2..6`.
    #[arg(long, value_parser = config::parse_cue_range)]
    pub cue_range: Option<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = config::parse_cue_range)]
    pub cue_range: Option<(usize, usize)>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Output directory for `train.jsonl` and `test.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Mode,
    /// Training corpus JSONL (usually `<split>/train.jsonl`).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Checked against the pre-trained model when given.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Directory of a pre-trained model.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Restricted target vocabulary, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub restricted: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Annotated JSONL to evaluate on.
    #[arg(long)]
    pub split: PathBuf,
    /// Score the whole vocabulary instead of the restricted set.
    #[arg(long)]
    pub full_vocab: bool,
    /// Write the evaluation as JSON (and a manifest next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Replace names with a pronoun before scoring (two-name examples only).
    #[arg(long)]
    pub ablate_names: bool,
    /// Examples that get per-example tables and heatmaps.
    #[arg(long)]
    pub heatmaps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `analyze`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this output instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: cuetrace::Error| e.to_string())
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code().clamp(0, 255) as u8;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parse and run without touching the process (for tests and bindings).
pub fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // A pool that already exists (tests, repeated calls) is kept.
        if rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().is_err() {
            log::debug!("global thread pool already initialised");
        }
    }
    if let Command::Replay(args) = &cli.command {
        return stages::replay(cli.workdir.as_deref(), args).map(|_| ());
    }
    let workdir = match cli.workdir {
        Some(w) => w,
        None => std::env::current_dir().map_err(|e| CliError::Usage(format!("no working directory: {e}")))?,
    };
    if !workdir.is_dir() {
        return Err(CliError::Usage(format!("workdir {} does not exist", workdir.display())));
    }
    let file_cfg = match &cli.config {
        Some(p) => PipelineConfig::load(&workdir.join(p))?,
        None => PipelineConfig::default(),
    };
    let plan = Plan::resolve(cli.command, &file_cfg)?;
    plan.execute(&workdir)?;
    Ok(())
}
