//! `ozbias`: command-line driver for the ozone-bias pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<ozbias::Error> for CliError {
    fn from(e: ozbias::Error) -> Self {
        match e {
            ozbias::Error::InvalidConfig(m) => CliError::Usage(format!("invalid configuration: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Extract(a) => commands::extract(a),
        Command::Synth(a) => commands::synth(a),
        Command::Build(a) => commands::build(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Compare(a) => commands::compare(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("ozbias: error: cannot start thread pool: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("ozbias: error: {}", one_line(&m));
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("ozbias: error: {}", one_line(&m));
            ExitCode::from(2)
        }
    }
}
