//! Command-line workflow around the `ncamorph` library. Every subcommand is
//! also callable as a function so tests can drive it in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

use crate::commands::{ablate, bench, eval, register, stability, synth, train};
pub use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "ncamorph", version, about = "Neural cellular automaton deformable registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset with a manifest.
    Synth(synth::SynthArgs),
    /// Train a model on a manifest.
    Train(train::TrainArgs),
    /// Register one pair with a trained checkpoint.
    Register(register::RegisterArgs),
    /// Score a checkpoint on a manifest against the zero-flow baseline.
    Eval(eval::EvalArgs),
    /// Spread of repeated stochastic registrations.
    Stability(stability::StabilityArgs),
    /// Inference time across input sizes.
    Bench(bench::BenchArgs),
    /// Train and score a grid of architectures.
    Ablate(ablate::AblateArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth::cmd_synth(a).map(drop),
        Command::Train(a) => train::cmd_train(a).map(drop),
        Command::Register(a) => register::cmd_register(a).map(drop),
        Command::Eval(a) => eval::cmd_eval(a).map(drop),
        Command::Stability(a) => stability::cmd_stability(a).map(drop),
        Command::Bench(a) => bench::cmd_bench(a).map(drop),
        Command::Ablate(a) => ablate::cmd_ablate(a).map(drop),
    }
}

/// Parses `argv` and runs it; returns the process exit code (0 success,
/// 2 usage error, 1 runtime error). Messages go to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
