use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod common;
mod manifest;

/// Footstrike classifiers: synthetic data, QAT training, search, streaming
/// simulation and FPGA cost reports.
#[derive(Parser)]
#[command(name = "footstrike", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic session dataset.
    Synth(cmd::synth::Args),
    /// Generalized pre-training, subject QAT fine-tuning and integer export.
    Train(cmd::train::Args),
    /// Bi-objective search over one architecture's configuration space.
    Search(cmd::search::Args),
    /// Replay a recorded session through a model and the feedback trigger.
    Simulate(cmd::simulate::Args),
    /// Latency, power, energy and resource report on a platform.
    Cost(cmd::cost::Args),
    /// Summarize a search archive.
    Report(cmd::report::Args),
    /// Per-layer shapes, parameters and MACs of a configuration.
    Describe(cmd::describe::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd::synth::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Search(a) => cmd::search::run(a),
        Command::Simulate(a) => cmd::simulate::run(a),
        Command::Cost(a) => cmd::cost::run(a),
        Command::Report(a) => cmd::report::run(a),
        Command::Describe(a) => cmd::describe::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(common::exit_code(&err))
        }
    }
}
