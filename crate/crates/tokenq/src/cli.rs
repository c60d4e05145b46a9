//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, FitMode};
use crate::config::{ObjectiveKind, Overrides};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "tokenq", version, about = "Queueing analysis of LLM serving: token limits, batching and delay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a latency model to calibration measurements.
    Fit {
        /// CSV with header `input_tokens,output_tokens,batch_size,latency_s`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        mode: FitMode,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Closed-form delay, loss and bounds for the configured policy.
    Analyze(RunArgs),
    /// Discrete-event simulation of the configured policy.
    Simulate(RunArgs),
    /// Best max-token limit (v1, v2) or fixed batch size (batch).
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Estimate delays by simulation instead of the formulas.
        #[arg(long)]
        simulate: bool,
    },
    /// Compare batching policies, optionally over an arrival-rate sweep.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Add paired-seed simulation columns.
        #[arg(long)]
        simulate: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config, or JSON when the name ends in `.json`.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides TOKENQ_SEED and the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of replications.
    #[arg(long)]
    pub reps: Option<u32>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ObjectiveArg {
    V1,
    V2,
    Batch,
}

impl From<ObjectiveArg> for ObjectiveKind {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::V1 => ObjectiveKind::V1,
            ObjectiveArg::V2 => ObjectiveKind::V2,
            ObjectiveArg::Batch => ObjectiveKind::Batch,
        }
    }
}

fn overrides(run: &RunArgs) -> Overrides {
    Overrides { seed: run.seed, replications: run.reps, ..Default::default() }
}

/// Runs one parsed command and returns the files it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Fit { input, mode, out_dir } => commands::fit(&input, mode, &out_dir),
        Command::Analyze(a) => commands::analyze(&a.config, &overrides(&a), &a.out_dir),
        Command::Simulate(a) => commands::simulate(&a.config, &overrides(&a), &a.out_dir),
        Command::Optimize { run, objective, simulate } => {
            let o = Overrides { objective: objective.map(Into::into), simulate, ..overrides(&run) };
            commands::optimize(&run.config, &o, &run.out_dir)
        }
        Command::Compare { run, simulate } => {
            let o = Overrides { simulate, ..overrides(&run) };
            commands::compare(&run.config, &o, &run.out_dir)
        }
    }
}
