mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{} configuration problem(s): {}", .0.len(), .0.join("; "))]
    Config(Vec<String>),
    #[error("{} invalid record(s): {}", .0.len(), .0.join("; "))]
    Records(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error("{} input(s) differ from the manifest: {}", .0.len(), .0.join("; "))]
    InputsChanged(Vec<String>),
    #[error("{} artifact(s) differ from the manifest: {}", .0.len(), .0.join("; "))]
    ArtifactsDiffer(Vec<String>),
    #[error(transparent)]
    Core(#[from] qdistill::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::Records(_) => "invalid_records",
            CliError::Usage(_) => "usage",
            CliError::InputsChanged(_) => "inputs_changed",
            CliError::ArtifactsDiffer(_) => "artifacts_differ",
            CliError::Core(e) => e.kind(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Records(_)
            | CliError::Usage(_)
            | CliError::InputsChanged(_) => 2,
            CliError::Core(_) | CliError::ArtifactsDiffer(_) => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        if let CliError::Config(list) | CliError::Records(list) | CliError::InputsChanged(list)
        | CliError::ArtifactsDiffer(list) = self
        {
            v["violations"] = serde_json::json!(list);
        }
        v
    }
}

#[derive(Debug, Parser)]
#[command(name = "qdistill", version, about = "Distil a query encoder from cached teacher embeddings")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Repeat a run from its manifest after checking its inputs are unchanged.
    Rerun(RerunArgs),
    /// Generate a synthetic teacher: records, qrels, caches and splits.
    Synth(SynthArgs),
    /// Build, size or inspect teacher embedding caches.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Filter, deduplicate, merge translations and split query records.
    Prepare(PrepareArgs),
    /// Train a student encoder.
    Train(TrainArgs),
    /// Compare student and teacher retrieval on held-out queries.
    Eval(EvalArgs),
    /// Data-efficiency sweep on the synthetic teacher.
    Sweep(SweepArgs),
    /// Latency and storage measurements.
    Bench(BenchArgs),
    /// Objective grid on the synthetic teacher.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also write word-for-word translations of the English training queries.
    #[arg(long, value_delimiter = ',')]
    pub translations: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Query,
    Document,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F16,
    F32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Align,
    Rank,
    Combined,
    Infonce,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Pack JSON-lines `{"id", "vector"}` embeddings into a cache file.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_enum, default_value = "f16")]
        dtype: DtypeArg,
    },
    /// Which caches an objective needs and their size.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_queries: u64,
        #[arg(long)]
        num_docs: u64,
        /// Defaults to `run.loss` from the config.
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long, default_value_t = 2048)]
        dim: usize,
        #[arg(long, value_enum, default_value = "f16")]
        dtype: DtypeArg,
    },
    /// Print a cache header.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Query record files (JSON lines), read in path order.
    #[arg(long, required = true, num_args = 1..)]
    pub records: Vec<PathBuf>,
    /// Translated record files to merge toward the per-language target.
    #[arg(long, num_args = 1..)]
    pub translations: Vec<PathBuf>,
    /// Query cache to check coverage against; copied (with any translation
    /// caches merged in) to the output directory.
    #[arg(long)]
    pub query_cache: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub translation_cache: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory with train.jsonl, val.jsonl, test.jsonl, qrels.jsonl,
    /// query_cache.nvtc and (optionally) doc_cache.nvtc.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub query_cache: Option<PathBuf>,
    #[arg(long)]
    pub doc_cache: Option<PathBuf>,
    /// Pre-pooled backbone features for `input = "external_features"`.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Queries to evaluate (defaults to test.jsonl in --data).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use a precomputed student run instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub student_run: Option<PathBuf>,
    /// Use a precomputed teacher run instead of ranking with the query cache.
    #[arg(long)]
    pub teacher_run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Percentages, e.g. 1,5,10,25,50,100; defaults to `sweep_fractions`.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Encoder to time; a seeded initialization of `run.encoder` otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write bench.csv.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// manifest.json of an earlier run.
    pub manifest: PathBuf,
    /// Output directory for the new run.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match dispatch(cli.command, std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

/// `args` is what the manifest records as the invocation.
fn dispatch(command: Command, args: Vec<String>) -> Result<(), CliError> {
    if let Command::Rerun(a) = command {
        return commands::rerun(&a);
    }
    manifest::set_args(args);
    match command {
        Command::Rerun(_) => unreachable!(),
        Command::Synth(a) => commands::synth(&a),
        Command::Cache(c) => commands::cache(&c),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Report(a) => commands::report(&a),
    }
}

/// Parses a recorded invocation and runs it.
fn replay(args: Vec<String>) -> Result<(), CliError> {
    let argv = std::iter::once("qdistill".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    dispatch(cli.command, args)
}
