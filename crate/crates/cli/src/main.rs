//! `flowmap`: train, sample, evaluate, sweep and verify few-step flow maps.

mod commands;
mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{Builtin, Ctx};
use config::{Overrides, RunConfig};
use sweep::Axis;

#[derive(Parser)]
#[command(name = "flowmap", version, about = "Few-step invertible flow maps for Boltzmann sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and train_log.csv.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Continue from this checkpoint, appending to the log.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample with likelihoods and score against exact draws.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        builtin: Option<Builtin>,
    },
    /// Evaluate across one axis; writes sweep_<axis>.csv.
    Sweep {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values (default: the standard ladder).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Number of consecutive seeds per cell, starting at the root seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Round-trip, finite-difference log-det and auxiliary-inverse checks.
    Verify {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        builtin: Option<Builtin>,
    },
    /// Draw samples with likelihoods without scoring them.
    Sample {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        builtin: Option<Builtin>,
    },
}

fn ctx(o: &Overrides) -> Result<Ctx> {
    Ctx::new(RunConfig::resolve(o)?, !o.no_timing)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { o, resume } => commands::train(&ctx(&o)?, resume.as_deref())?,
        Command::Eval { o, checkpoint, builtin } => commands::eval(&ctx(&o)?, checkpoint.as_deref(), builtin)?,
        Command::Sample { o, checkpoint, builtin } => commands::sample(&ctx(&o)?, checkpoint.as_deref(), builtin)?,
        Command::Sweep {
            o,
            axis,
            values,
            seeds,
            checkpoint,
        } => sweep::sweep(&ctx(&o)?, axis, values, seeds, checkpoint.as_deref())?,
        Command::Verify { o, checkpoint, builtin } => {
            if !commands::verify(&ctx(&o)?, checkpoint.as_deref(), builtin)? {
                eprintln!("verification failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
