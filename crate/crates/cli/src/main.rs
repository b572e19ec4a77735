//! `kgelab` command-line runner.
//!
//! Exit codes: 0 success, 1 other failure (e.g. divergence), 2 config error,
//! 3 data error, 4 artifact mismatch.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "kgelab", version, about = "Knowledge graph embedding experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory; the manifest is written at its root.
    #[arg(long, global = true, default_value = "kgelab-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint, run log, test report and manifest.
    Train,
    /// Rank a split with a trained checkpoint.
    Evaluate(commands::EvaluateArgs),
    /// Mine inverse relations, measure test leakage and score the inverse model.
    Audit(commands::AuditArgs),
    /// PageRank and relation-specific indegree statistics.
    Analyze(commands::AnalyzeArgs),
    /// Write a derived dataset (inverse-free or indegree-filtered).
    Derive(commands::DeriveArgs),
    /// Grid search over `grid.KEY=v1,v2,...` entries, ranked by validation metric.
    Sweep(commands::SweepArgs),
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }

    pub fn other(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<kgelab::Error> for CliError {
    fn from(e: kgelab::Error) -> Self {
        use kgelab::Error as E;
        let code = match &e {
            E::Config(_) => 2,
            E::Io { .. } | E::Parse { .. } | E::Data(_) => 3,
            E::Checkpoint(_) => 4,
            E::Dimension { .. } | E::Index { .. } | E::NonFinite { .. } => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    kgelab::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Train => commands::train(g),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Audit(a) => commands::audit(g, a),
        Command::Analyze(a) => commands::analyze(g, a),
        Command::Derive(a) => commands::derive(g, a),
        Command::Sweep(a) => commands::sweep(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
