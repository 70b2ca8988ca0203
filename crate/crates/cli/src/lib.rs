//! Command-line front end and HTTP query service for the knowledge base.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod kb;
pub mod service;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use crate::error::{EXIT_OK, EXIT_USAGE};

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match cli::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
