//! Configuration, persistence and the command-line subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use config::{BetaMode, RunConfig};
