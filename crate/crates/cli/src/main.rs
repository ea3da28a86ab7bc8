//! Batch entry point: data simulation, estimation, summarization, and
//! counterfactual analysis for dynamic discrete choice models with
//! Gumbel-mixture utility shocks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ddcmix", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Configuration file path or preset name
    /// (rust-n3, rust-n10, gilleskie-mix, gilleskie-logit).
    #[arg(long)]
    config: String,
    /// Output directory; defaults to the config's `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for the command's random stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates data from the configured data-generating process.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Runs the posterior sampler on simulated or supplied data.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding `counts.csv` (and `manifest.json`); defaults
        /// to the output directory of `simulate`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of independent chains run concurrently.
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Continue an interrupted run from its checkpoint files.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Produces posterior reports and plot-ready tables from a draw store.
    Summarize {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding the chain stores; defaults to the output dir.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Additional stored draws to discard from the front of each chain.
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        /// Additional thinning applied to stored draws.
        #[arg(long, default_value_t = 1)]
        thin: usize,
    },
    /// Per-draw counterfactual solves and interval reports.
    Counterfactual {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding the chain stores and the simulated data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common } => commands::simulate::run(&common.config, common.out, common.seed),
        Command::Estimate {
            common,
            data,
            chains,
            resume,
        } => commands::estimate::run(&common.config, common.out, data, common.seed, chains, resume),
        Command::Summarize {
            common,
            data,
            burn_in,
            thin,
        } => commands::summarize::run(&common.config, common.out, data, burn_in, thin),
        Command::Counterfactual { common, data } => {
            commands::counterfactual::run(&common.config, common.out, data, common.seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Numerical failures exit 3, configuration/usage problems 2.
            let numerical = err.downcast_ref::<ddcmix::Error>().map_or(false, |e| {
                matches!(
                    e,
                    ddcmix::Error::NonConvergence { .. } | ddcmix::Error::Domain(_)
                )
            });
            if numerical {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
