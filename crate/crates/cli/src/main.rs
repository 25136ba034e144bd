//! `etir`: schedule, compare, analyze, verify and emit tiled tensor programs.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "etir",
    version,
    about = "Graph-based schedule construction for tensor operators"
)]
pub struct Cli {
    /// Operator document (JSON).
    #[arg(long, global = true)]
    pub op: Option<PathBuf>,
    /// Hardware spec file, or a bundled profile name.
    #[arg(long, global = true, default_value = "generic-gpu")]
    pub hw: String,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = EngineArg::Graph)]
    pub engine: EngineArg,
    #[arg(long, global = true)]
    pub t0: Option<f64>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub restarts: Option<u64>,
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
    #[arg(long = "beam-width", global = true)]
    pub beam_width: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineArg {
    Graph,
    Tree,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Construct schedules for one operator and write `results.json`.
    Schedule,
    /// Run both engines over a suite and write `compare.csv`.
    Compare {
        #[arg(long)]
        suite: PathBuf,
        /// Seeds for the graph engine, e.g. `0-7` or `0,3,5`.
        #[arg(long, default_value = "0-7")]
        seeds: String,
    },
    /// Enumerate the construction chain and report its properties.
    Analyze {
        #[arg(long = "max-states", default_value_t = 50_000)]
        max_states: usize,
        /// Virtual-thread factors offered as moves.
        #[arg(long, value_delimiter = ',')]
        vthreads: Option<Vec<u64>>,
        #[arg(long = "no-inv-tile")]
        no_inv_tile: bool,
        #[arg(long = "max-tile-factor", default_value_t = 2)]
        max_tile_factor: u64,
    },
    /// Replay, lower and interpret every result of a results file.
    Verify {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        mode: Precision,
    },
    /// Write C source for one schedule.
    Emit {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Cost model queries.
    Cost {
        #[command(subcommand)]
        command: CostCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum CostCommand {
    /// Per-level traffic and the cost breakdown of one schedule.
    Explain {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
    .into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GENSOR_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let code = err
                .downcast_ref::<Failure>()
                .map_or(EXIT_PARTIAL, |f| f.code);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
