//! File formats, run configuration and subcommands for the `emovox` tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod format;

pub use error::{CliError, ExitClass, Result};
