//! Experiment orchestrator: config ingestion, pipeline driving, report
//! emission, and the exit-code contract.
//!
//! Exit codes: 0 success (findings such as failed conversions or label
//! divergences included), 2 config error, 3 corpus or IO error, 4 missing
//! inputs, 5 internal invariant violation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "deltadiff", version, about = "Differential testing of inference graph variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the experiment's variant matrix onto disk.
    Generate(CommonArgs),
    /// Execute every generated variant over the corpus.
    Run(CommonArgs),
    /// Compare execution records pairwise and emit reports.
    Analyze(CommonArgs),
    /// End-to-end fault walkthrough: inject, diverge, localize, repair.
    Demo(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Capture per-layer activation traces while running.
    #[arg(long)]
    debug: bool,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Harness malfunction classes; findings are not errors and exit 0.
#[derive(Debug)]
enum CliError {
    /// Unusable configuration (exit 2).
    Config(String),
    /// Corpus or IO failure (exit 3).
    Io(String),
    /// Required inputs absent, e.g. records before analyze (exit 4).
    Missing(String),
    /// Internal invariant violation (exit 5).
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Internal(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Missing(m) | CliError::Internal(m) => m,
        }
    }
}

fn main() -> ExitCode {
    // Die silently when the read end of a pipe closes, like other CLI
    // tools, instead of panicking on the failed stdout write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(&args),
        Command::Run(args) => commands::run(&args),
        Command::Analyze(args) => commands::analyze(&args),
        Command::Demo(args) => commands::demo(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deltadiff: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
