use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use bsre::cli::{run, Command, Overrides};

/// Solver and verification driver for backward stochastic Lyapunov and
/// Riccati equations on a spectral Galerkin truncation.
#[derive(Debug, Parser)]
#[command(name = "bsre", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,

    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,

    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Size of the worker pool, overriding the config.
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides {
        seed: args.seed,
        workers: args.workers,
        out: args.out,
    };
    let code = run(args.command, &args.config, &overrides);
    ExitCode::from(code as u8)
}
