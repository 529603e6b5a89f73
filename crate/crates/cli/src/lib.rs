//! Orchestration for the door task: config, file I/O, the subcommands, the
//! dataset-aggregation loop and report export.

pub mod aggregate;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
