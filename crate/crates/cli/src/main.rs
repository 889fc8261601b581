//! `mraug`: simulate, augment, validate and summarize multirate
//! demonstration datasets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mraug_core::sim::TrajectoryName;
use mraug_core::Method;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mraug", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic episodes with the bilateral-control simulator.
    Simulate {
        /// Simulation config (TOML). Defaults to the built-in reference setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// hold, step or pick_sweep
        #[arg(long, default_value = "pick_sweep")]
        trajectory: TrajectoryName,
        /// Directory that receives one sub-directory per episode.
        #[arg(long)]
        out: PathBuf,
        /// Number of episodes.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        /// Seed of the first episode; episode i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace existing episode directories.
        #[arg(long)]
        force: bool,
        /// Write a JSON summary here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build a training dataset from episodes.
    Augment {
        /// Episode directories, or directories containing episode directories.
        in_dirs: Vec<PathBuf>,
        /// downsample, forward or dabi
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check an episode or dataset directory.
    Validate {
        dir: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print counts and per-joint statistics for an episode or dataset.
    Stats {
        dir: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            trajectory,
            out,
            count,
            seed,
            force,
            report,
        } => commands::simulate(
            config.as_deref(),
            trajectory,
            &out,
            count,
            seed,
            force,
            report.as_deref(),
        ),
        Command::Augment {
            in_dirs,
            method,
            out,
            force,
            report,
        } => commands::augment(&in_dirs, method, &out, force, report.as_deref()),
        Command::Validate { dir, report } => commands::validate(&dir, report.as_deref()),
        Command::Stats { dir, report } => commands::stats(&dir, report.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
