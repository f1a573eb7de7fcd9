//! `muse`: dataset building, staged training, generation and evaluation.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod dataset;
mod eval;
mod generate;
mod manifest;
mod settings;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "muse", version, about = "Multi-modal music understanding and generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build instruction datasets.
    Dataset(dataset::Args),
    /// Run training stages.
    Train(train::Args),
    /// Generate a reply, and audio when the audio tokens fire.
    Generate(generate::Args),
    /// Score candidates against references.
    Eval(eval::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => dataset::run(a),
        Command::Train(a) => train::run(a),
        Command::Generate(a) => generate::run(a),
        Command::Eval(a) => eval::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
