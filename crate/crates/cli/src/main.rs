//! Command-line front end: train, sample, eval, metrics, verify.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 numeric failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verification(String),
    Numeric(String),
}

impl From<udlm::Error> for CliError {
    fn from(e: udlm::Error) -> Self {
        match e {
            udlm::Error::Numeric(_) | udlm::Error::Training(_) => Self::Numeric(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Verification(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

fn cli() -> Command {
    Command::new("udlm")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Discrete diffusion models with uniform or absorbing noise and guided sampling")
        .subcommand_required(true)
        .arg(
            Arg::new("threads")
                .long("threads")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("Worker threads [default: available cores]; results do not depend on it"),
        )
        .subcommands(commands::subcommands())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(&n) = matches.get_one::<usize>("threads") {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Verification(m) | CliError::Numeric(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
