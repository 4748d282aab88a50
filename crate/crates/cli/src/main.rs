//! `qtrans`: experiment drivers for the energy-weighted propagator library.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RawConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "qtrans",
    version,
    about = "Energy-weighted propagator experiments"
)]
struct Cli {
    /// Flat `key = value` file or a JSON summary from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for cached `G0` tensors.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Oscillator coupled to a repeatedly reset cavity.
    RefTraj,
    /// Relaxation under the weighted propagator.
    WtTraj,
    /// Stationary states over a temperature and diffusion grid.
    StationaryScan,
    /// Energy-flux cumulants per eigenstate.
    Flux,
    /// Entropy and heat ledger for a spin in a fluctuating field.
    SpinCollapse,
    /// Short-step generator against the high-temperature master equation.
    ClCheck,
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    let ctx = Context {
        out: cli.out,
        seed: cli.seed,
        cache: cli.cache,
    };
    if let Some(dir) = &ctx.cache {
        std::fs::create_dir_all(dir)?;
    }
    let out = match cli.command {
        Command::RefTraj => commands::ref_traj(raw, &ctx)?,
        Command::WtTraj => commands::wt_traj(raw, &ctx)?,
        Command::StationaryScan => commands::stationary_scan(raw, &ctx)?,
        Command::Flux => commands::flux(raw, &ctx)?,
        Command::SpinCollapse => commands::spin_collapse(raw, &ctx)?,
        Command::ClCheck => {
            let (out, report) = commands::cl_check(raw, &ctx)?;
            print!("{report}");
            out
        }
    };
    Ok(commands::written_list(&out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(list) => {
            println!("{list}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qtrans: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
