//! `compass-lab`: one binary that drives every crate in the workspace.
//!
//! Each subcommand resolves a JSON config (file values, then flags), runs,
//! and leaves its artifacts under `<out>/<subcommand>/` together with a
//! `manifest.json` and a `metrics.csv`. Outputs depend only on the resolved
//! config and seed.
//!
//! Exit codes: 0 on success, 1 on a failed validation or runtime error, 2 on
//! a bad command line or config.

pub mod acceptance;
pub mod args;
pub mod commands;
pub mod config;
pub mod eval;
pub mod run;

use std::ffi::OsString;

use clap::Parser;

pub use config::ConfigError;
pub use run::{git_describe, Run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// What a finished command reports back.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Validation checks that did not hold; empty on success.
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn ok() -> Self {
        Self::default()
    }
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli) {
        Ok(outcome) if outcome.failures.is_empty() => EXIT_OK,
        Ok(outcome) => {
            for f in &outcome.failures {
                eprintln!("validation failed: {f}");
            }
            EXIT_FAILED
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_CONFIG
            } else {
                EXIT_FAILED
            }
        }
    }
}
