//! Reproducible experiment runs over the df-lab toolkit.
//!
//! Every subcommand reads an optional JSON config file, lets flags
//! override it, echoes the fully-resolved config into a JSON summary next
//! to its primary output, and is deterministic per seed: rerunning with
//! the same config yields byte-identical CSV bodies (only `#` metadata
//! lines differ). `DF_LAB_THREADS` caps the worker pool.

mod commands;
mod config;
mod output;

use clap::{Args, Parser, Subcommand};
use config::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "df-lab",
    version,
    about = "Diffusion Fisher toolkit: oracles, trace accessors, flows, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long, value_name = "path.json")]
    pub config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Primary output path (a `.json` summary lands next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a dataset CSV (or the Gaussian law as JSON).
    GenData(commands::gen_data::GenDataArgs),
    /// Check the score/Fisher oracles against finite differences.
    FisherCheck(commands::fisher_check::FisherCheckArgs),
    /// Compare trace accessors against the exact Fisher trace.
    TraceBench(commands::trace_bench::TraceBenchArgs),
    /// Integrate per-sample negative log likelihoods along the flow.
    Nll(commands::nll::NllArgs),
    /// Guided sampling per adjoint operator, with a gradient cross-check.
    AdjointSim(commands::adjoint_sim::AdjointSimArgs),
    /// Flow-map symmetry diagnostic over sampled chains.
    OtTest(commands::ot_test::OtTestArgs),
    /// Fit an accessor net and save its checkpoint.
    Train(commands::train::TrainArgs),
}

fn init_thread_pool() -> Result<(), String> {
    let Ok(raw) = std::env::var("DF_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("DF_LAB_THREADS must be a positive integer, got '{raw}'"))?;
    if n == 0 {
        return Err("DF_LAB_THREADS must be a positive integer".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot configure the thread pool: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_thread_pool() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data::run(a),
        Command::FisherCheck(a) => commands::fisher_check::run(a),
        Command::TraceBench(a) => commands::trace_bench::run(a),
        Command::Nll(a) => commands::nll::run(a),
        Command::AdjointSim(a) => commands::adjoint_sim::run(a),
        Command::OtTest(a) => commands::ot_test::run(a),
        Command::Train(a) => commands::train::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Numeric(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
