//! `deepsitar` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or invalid input, 3 I/O or malformed
//! file, 4 numerical failure.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepsitar::Error;

#[derive(Parser)]
#[command(name = "deepsitar", version, about = "Simulate, train and evaluate shape-invariant growth-curve autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic cohort from a truth config.
    Simulate(commands::SimulateArgs),
    /// Train a model on a dataset file.
    Train(commands::TrainArgs),
    /// Score a model on a dataset file.
    Evaluate(commands::EvaluateArgs),
    /// Predict effects and curves for new individuals.
    Predict(commands::PredictArgs),
    /// Run simulate, train and evaluate over a grid of cohort sizes and segment counts.
    Reproduce(commands::ReproduceArgs),
}

/// Seed flag shared by commands that draw random numbers.
#[derive(Args, Clone, Copy)]
pub struct SeedArg {
    /// RNG seed; falls back to DEEPSITAR_SEED, then 0.
    #[arg(long, env = "DEEPSITAR_SEED", default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Format(_) => 3,
                Error::DivergenceDetected { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::NonFiniteEvaluation { .. }
                | Error::Shape(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Reproduce(a) => commands::reproduce(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(Error::DivergenceDetected { .. }) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
                eprintln!("hint: rerun with a smaller --lr or a tighter --clip");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
