//! `ldrnn`: story-point estimation pipeline from the command line.
//!
//! Exit codes: 0 success, 1 runtime or transport failure, 2 bad flags or
//! configuration.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

/// Marks an error as the caller's fault (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "ldrnn", version, about = "Deep-learning story point estimation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage [default: 42]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download issues from a JIRA instance into a corpus file.
    Ingest(IngestArgs),
    /// Filter a corpus and split it chronologically 60/20/20.
    Prepare(PrepareArgs),
    /// Pre-train embedding and LSTM as a language model.
    Pretrain(PretrainArgs),
    /// Train the estimator on a prepared split.
    Train(TrainArgs),
    /// Estimate story points for issues with a trained checkpoint.
    Estimate(EstimateArgs),
    /// Fit a comparison estimator and write its estimates.
    Baseline(BaselineArgs),
    /// Compare estimate files on the held-out test issues.
    Evaluate(EvaluateArgs),
    /// Train on one project and estimate another.
    CrossProject(CrossProjectArgs),
    /// Cluster the learned embeddings of frequent words.
    ClusterWords(ClusterArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub base_url: String,
    #[arg(long)]
    pub jql: String,
    /// Story point field id [default: customfield_10002]
    #[arg(long)]
    pub sp_field: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_issues: Option<usize>,
    #[arg(long)]
    pub page_size: Option<usize>,
    /// Requests per second.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Bearer token; read from the environment so it stays out of shell history.
    #[arg(long, env = "LDRNN_JIRA_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Projects with at most this many labeled issues are dropped [default: 300]
    #[arg(long)]
    pub min_project_size: Option<usize>,
    /// Keep only this project.
    #[arg(long)]
    pub project: Option<String>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Extra corpus files used as unlabeled text.
    #[arg(long)]
    pub unlabeled: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint from `pretrain`; requires --vocab.
    #[arg(long, requires = "vocab")]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus of issues to estimate; labels are ignored.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Estimate file (`issue_key<TAB>estimate`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineModel {
    Mean,
    Median,
    Random,
    BowRf,
    LstmRf,
    Cbr,
    Cart,
    Ols,
    Lasso,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub model: BaselineModel,
    #[arg(long)]
    pub data: PathBuf,
    /// Issues to estimate [default: <data>/test_inputs.jsonl]
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Issue feature CSV for cbr, cart, ols and lasso; bag-of-words otherwise.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Trained checkpoint whose pooled LSTM vectors feed lstm-rf.
    #[arg(long, requires = "vocab")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `NAME=PATH` estimate files; the first is the reference model.
    #[arg(long = "estimates", required = true)]
    pub estimates: Vec<String>,
    /// `A:B` model pairs to test [default: first model against each other]
    #[arg(long = "pair")]
    pub pairs: Vec<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CrossProjectArgs {
    /// Prepared directory of the source project.
    #[arg(long)]
    pub source: PathBuf,
    /// Prepared directory of the target project.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value = "within")]
    pub setting: String,
    /// Pre-train on the setting's unlabeled text first.
    #[arg(long)]
    pub pretrain: bool,
    /// Other corpora of the shared repository, used in the within setting.
    #[arg(long)]
    pub unlabeled: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Prepared directory; word frequencies come from its training text.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = ldrnn_core::evaluation::kmeans::DEFAULT_CLUSTERS)]
    pub clusters: usize,
    #[arg(long, default_value_t = ldrnn_core::evaluation::kmeans::DEFAULT_TOP_WORDS)]
    pub top_words: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.resolve_seed(cli.seed);
    match cli.command {
        Command::Ingest(a) => commands::ingest(&cfg, a),
        Command::Prepare(a) => commands::prepare(&cfg, a),
        Command::Pretrain(a) => commands::pretrain(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Baseline(a) => commands::baseline(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::CrossProject(a) => commands::cross_project(&cfg, a),
        Command::ClusterWords(a) => commands::cluster_words(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
