//! Command-line driver for exact fixed-point guidance experiments.
//!
//! One TOML config file describes the schedule, the Gaussian-mixture data
//! model, and the experiment sections; each subcommand runs one experiment
//! and writes provenance-stamped CSV/JSON outputs into the output directory.
//! Exit codes: 0 on success, 2 for config violations (the message names the
//! violated field), 3 for numerical failures (the message carries the
//! offending timestep), 1 for I/O problems.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{CliError, CliResult, Config};

/// Exact fixed-point calibration experiments over Gaussian-mixture models.
#[derive(Parser)]
#[command(name = "fpcalib", version, about)]
struct Cli {
    /// Path to the TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.dir`; default `out/`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for seed-level parallelism (0 uses all cores).
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    workers: usize,

    /// Replace `run.seeds` with this comma-separated list.
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    seed_override: Option<Vec<u64>>,

    #[command(subcommand)]
    command: Command,
}

/// The experiment subcommands.
#[derive(Subcommand)]
enum Command {
    /// Run guided trajectories and write them with their gap series.
    Sample,
    /// Run trajectories and report gap statistics.
    Gap,
    /// Estimate operator contraction rates at chosen timesteps.
    Contraction,
    /// Validate the budget-allocation loss bound over feasible partitions.
    Bound,
    /// Test whether guided inversion identifies its own condition.
    Golden,
    /// Repeat an experiment along one parameter axis.
    Sweep,
    /// Write the schedule's derived coefficient table.
    ScheduleDump,
}

fn run(cli: &Cli) -> CliResult<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config PATH is required".to_string()))?;
    let mut cfg = Config::load(path)?;
    if let Some(seeds) = &cli.seed_override {
        cfg.apply_seed_override(seeds)?;
    }
    let hash = cfg.hash();
    let out = cfg.out_dir(cli.out.as_deref());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| CliError::Config(format!("--workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::Sample => commands::cmd_sample(&cfg, &out, &hash),
        Command::Gap => commands::cmd_gap(&cfg, &out, &hash),
        Command::Contraction => commands::cmd_contraction(&cfg, &out, &hash),
        Command::Bound => commands::cmd_bound(&cfg, &out, &hash),
        Command::Golden => commands::cmd_golden(&cfg, &out, &hash),
        Command::Sweep => commands::cmd_sweep(&cfg, &out, &hash),
        Command::ScheduleDump => commands::cmd_schedule_dump(&cfg, &out, &hash),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
