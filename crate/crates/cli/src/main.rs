use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
mod config;

use config::Config;

/// Exit 2 for configuration and schema problems, 1 for everything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Schema(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Schema(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<rwr::corpus::CorpusError> for CliError {
    fn from(e: rwr::corpus::CorpusError) -> Self {
        match e {
            rwr::corpus::CorpusError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<rwr::policy::CheckpointError> for CliError {
    fn from(e: rwr::policy::CheckpointError) -> Self {
        match e {
            rwr::policy::CheckpointError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rwr", version, about = "Retrieval-augmented multiple-choice reasoning: index, train, evaluate")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set top_k=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster, select and difficulty-label a question set.
    EnvBuild {
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Comma-separated evaluator checkpoints.
        #[arg(long)]
        evaluators: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        kb: KbArgs,
    },
    /// Chunk a knowledge base and write its search index.
    KbIndex {
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-k chunks for a query.
    KbSearch {
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        kb: KbArgs,
    },
    /// Format warm start followed by the two training stages.
    Train {
        #[arg(long)]
        qa: Option<PathBuf>,
        #[command(flatten)]
        kb: KbArgs,
        /// Where the trained checkpoint is written.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Render rollouts with their confidence report.
    Rollout {
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Only this question id.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Accuracy report over a benchmark.
    Eval {
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Also print one line per item before the summary.
        #[arg(long)]
        per_item: bool,
        #[command(flatten)]
        policy: PolicyArgs,
    },
}

#[derive(Debug, Args)]
struct KbArgs {
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long)]
    mm: Option<PathBuf>,
    /// Skip confidence-driven re-retrieval.
    #[arg(long)]
    no_cdir: bool,
}

fn path_flag(flags: &mut Vec<String>, key: &str, value: &Option<PathBuf>) {
    if let Some(v) = value {
        flags.push(format!("{key}={}", v.display()));
    }
}

impl KbArgs {
    fn flags(&self, flags: &mut Vec<String>) {
        path_flag(flags, "kb", &self.kb);
        path_flag(flags, "index", &self.index);
    }
}

impl PolicyArgs {
    fn flags(&self, flags: &mut Vec<String>) {
        path_flag(flags, "checkpoint", &self.checkpoint);
        path_flag(flags, "mm", &self.mm);
        self.kb.flags(flags);
        if self.no_cdir {
            flags.push("cdir=false".into());
        }
    }
}

/// Command-line flags as `key=value` overrides.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut f = Vec::new();
    if let Some(s) = cli.seed {
        f.push(format!("seed={s}"));
    }
    match &cli.command {
        Command::EnvBuild { qa, evaluators, out, kb } => {
            path_flag(&mut f, "qa", qa);
            kb.flags(&mut f);
            if let Some(e) = evaluators {
                f.push(format!("evaluators={e}"));
            }
            path_flag(&mut f, "out", out);
        }
        Command::KbIndex { kb, out } => {
            path_flag(&mut f, "kb", kb);
            path_flag(&mut f, "out", out);
        }
        Command::KbSearch { k, kb, .. } => {
            if let Some(k) = k {
                f.push(format!("top_k={k}"));
            }
            kb.flags(&mut f);
        }
        Command::Train {
            qa,
            kb,
            checkpoint,
            init_checkpoint,
        } => {
            path_flag(&mut f, "qa", qa);
            kb.flags(&mut f);
            path_flag(&mut f, "checkpoint", checkpoint);
            path_flag(&mut f, "init_checkpoint", init_checkpoint);
        }
        Command::Rollout { qa, policy, .. } => {
            path_flag(&mut f, "qa", qa);
            policy.flags(&mut f);
        }
        Command::Eval { benchmark, policy, .. } => {
            path_flag(&mut f, "qa", benchmark);
            policy.flags(&mut f);
        }
    }
    f
}

fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    cfg.apply_overrides(&cli.sets)?;
    cfg.apply_overrides(&flag_overrides(cli))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    log::debug!("effective config:\n{}", cfg.to_text());
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::EnvBuild { .. } => commands::env_build(&cfg, &mut out),
        Command::KbIndex { .. } => commands::kb_index(&cfg, &mut out),
        Command::KbSearch { query, .. } => commands::kb_search(&cfg, query, &mut out),
        Command::Train { .. } => commands::train(&cfg, &mut out),
        Command::Rollout { id, .. } => commands::rollout(&cfg, id.as_deref(), &mut out),
        Command::Eval { per_item, .. } => commands::eval(&cfg, *per_item, &mut out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rwr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
