//! File formats, configuration, synthetic data and subcommand drivers behind
//! the `sigrot` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod synth;

pub use error::{CliError, CliResult};
