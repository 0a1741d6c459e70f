//! `forge`: command line front end for branch training, distillation, the
//! shared registry and the comparative experiments.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 validation or
//! integrity failure, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use forge_core::merge::MergeStrategy;
use forge_core::ForgeError;

/// Bad flags, unreadable configuration or inconsistent inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "forge",
    version,
    about = "Collaborative low-rank adapter development"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random draw; falls back to the config file, then FORGE_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Fusion,
    Mixture,
}

impl From<StrategyArg> for MergeStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Fusion => MergeStrategy::Fusion,
            StrategyArg::Mixture => MergeStrategy::Mixture,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy tasks into a data directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Create an empty registry.
    Init {
        repo: PathBuf,
        #[arg(long, value_enum, default_value = "mixture")]
        strategy: StrategyArg,
    },
    /// Train a plugin module on one task's training split.
    TrainBranch {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil one task's training split into a small synthetic set.
    Distill {
        #[command(flatten)]
        task: TaskArgs,
        /// Synthetic examples per class.
        #[arg(long)]
        ipc: Option<usize>,
        /// Matching iterations.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage a plugin and its distilled set and queue them for merging.
    Commit {
        repo: PathBuf,
        #[arg(long)]
        plugin: PathBuf,
        #[arg(long)]
        distilled: PathBuf,
        /// Task name; read from the plugin sidecar when omitted.
        #[arg(long)]
        task: Option<String>,
        /// Data directory whose manifest defines `--task`. Without it the
        /// definition comes from the sidecar or the registry.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "contributor")]
        author: String,
    },
    /// Absorb queued contributions into the main branch.
    Merge {
        repo: PathBuf,
        /// Merge every queued contribution in queue order (default).
        #[arg(long, conflicts_with_all = ["next", "commit"])]
        all: bool,
        /// Merge only the oldest queued contribution.
        #[arg(long, conflicts_with = "commit")]
        next: bool,
        /// Merge the given queued commits in the given order.
        #[arg(long, num_args = 1..)]
        commit: Vec<String>,
    },
    /// Score the main branch (or a past round) on test splits.
    Eval {
        repo: PathBuf,
        /// Directory written by `gen-data`; its test splits are scored.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Restrict to these tasks; defaults to every task the registry knows.
        #[arg(long, num_args = 1..)]
        tasks: Vec<String>,
        #[arg(long)]
        round: Option<u32>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the item of a past round and write it to a file.
    Checkout {
        repo: PathBuf,
        #[arg(long)]
        round: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the main reference, queue and merge history.
    Status {
        repo: PathBuf,
        /// Also re-hash every object and replay the merge log.
        #[arg(long)]
        verify: bool,
    },
    /// Run a comparative experiment end to end.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        /// Scratch directory for the per-run registries.
        workdir: PathBuf,
        #[arg(long, default_value = "reports")]
        reports: PathBuf,
        #[arg(long, value_enum, num_args = 1.., default_values = ["fusion", "mixture"])]
        strategies: Vec<StrategyArg>,
        /// Run seeds; overrides `[experiment] seeds`.
        #[arg(long, num_args = 1..)]
        seeds: Vec<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    Orders,
    Baselines,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long)]
    pub task: String,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Take the base encoder and adapter shape from this registry.
    #[arg(long)]
    pub repo: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<ForgeError>() {
            return if e.is_validation() { 2 } else { 3 };
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
