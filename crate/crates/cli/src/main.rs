mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failures the binary reports; usage problems exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        // clap prints help/version to stdout with code 0, usage errors to stderr with code 2
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Run(a) => commands::run(a, &argv),
        Command::VocabBuild(a) => commands::vocab_build(a, &argv),
        Command::Distort(a) => commands::distort(a, &argv),
        Command::Evaluate(a) => commands::evaluate(a, &argv),
        Command::Losses(a) => commands::losses(a, &argv),
        Command::Synth(a) => commands::synth(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(e.code())
        }
    }
}
