//! Library half of the `accel-ode` command-line tool: data files, run
//! configuration, report documents and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod report;

pub use error::{CliError, CliResult};
