//! Shared command implementations for the `cotrain` and `memcalc` binaries.
//!
//! Exit codes: 0 success, 1 runtime or I/O error, 2 invalid configuration or
//! arguments, 3 simulation aborted before its last round.

pub mod demo;
pub mod ledger;
pub mod memcalc;
pub mod shard;
pub mod simulate;

use std::fmt;
use std::process::ExitCode;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ABORTED: u8 = 3;

/// An error paired with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }

    pub fn aborted(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_ABORTED,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult = Result<(), Failure>;

/// Prints the failure to stderr and converts to a process exit code.
pub fn finish(result: CmdResult) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
