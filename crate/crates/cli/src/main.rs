// SPDX-License-Identifier: MIT OR Apache-2.0

//! `laser`: apply, search and analyze layer-selective rank reductions.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{AnalyzeArgs, PlanArgs};
use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "laser",
    version,
    about = "Layer-selective rank reduction for transformer checkpoints"
)]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a plan, write the modified checkpoint and (with --dataset) reports.
    Apply {
        #[command(flatten)]
        run: RunConfig,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Evaluate every single intervention in the grid and keep the best.
    Search {
        #[command(flatten)]
        run: RunConfig,
    },
    /// Greedily compose interventions from the last layer to the first.
    Compose {
        #[command(flatten)]
        run: RunConfig,
    },
    /// Flip sets, frequency bins, monotonicity, higher-order study, sweeps.
    Analyze {
        #[command(flatten)]
        run: RunConfig,
        #[command(flatten)]
        args: AnalyzeArgs,
    },
    /// Effective rank of every weight matrix.
    EffectiveRank {
        #[command(flatten)]
        run: RunConfig,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Apply { run, plan } => within(run.resolve(file)?, |c| commands::apply(c, &plan)),
        Command::Search { run } => within(run.resolve(file)?, commands::search),
        Command::Compose { run } => within(run.resolve(file)?, commands::compose),
        Command::Analyze { run, args } => {
            within(run.resolve(file)?, |c| commands::analyze(c, &args))
        }
        Command::EffectiveRank { run } => within(run.resolve(file)?, commands::effective_rank_cmd),
    }
}

/// Runs `f` on a pool bounded by the configured thread count.
fn within<F>(cfg: RunConfig, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&RunConfig) -> anyhow::Result<()> + Send,
{
    laser_core::parallel::with_threads(cfg.threads(), || f(&cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
