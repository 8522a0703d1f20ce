//! The `mdb` command line: curation, training/evaluation, spectra and the
//! manual-review service.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod cli;
pub mod commands;
pub mod server;
pub mod settings;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use cli::Cli;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, values or config; exit code 2.
    Usage(String),
    /// Anything that failed while doing the work; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mdb_core::Error> for CliError {
    fn from(e: mdb_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
