mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use lanam::Error;

use crate::args::{Cli, Command};
use crate::config::RunConfig;

/// Process exit status for each error kind.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) => 2,
        Error::Io(_) => 3,
        Error::ParseError { .. } | Error::Json(_) => 4,
        Error::MissingColumn(_) => 5,
        Error::NonBinaryTarget { .. } | Error::InvalidTarget { .. } | Error::SingleClass => 6,
        Error::NotPositiveDefinite { .. } | Error::DegenerateParameters { .. } => 7,
        Error::Diverged { .. } => 8,
        Error::StalePosterior { .. } => 9,
        Error::KTooLarge { .. } => 10,
        Error::DuplicatePair(..) => 11,
        Error::ShapeMismatch(_) | Error::IndexOutOfRange { .. } => 12,
    }
}

fn run(cmd: &Command) -> lanam::Result<()> {
    let cfg = RunConfig::resolve(cmd)?;
    cfg.write()?;
    match cmd {
        Command::Train { .. } => commands::train(&cfg),
        Command::Explain { .. } => commands::explain(&cfg),
        Command::Interactions { .. } => commands::interactions(&cfg),
        Command::Finetune { .. } => commands::finetune(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Synth { .. } => commands::synth(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
