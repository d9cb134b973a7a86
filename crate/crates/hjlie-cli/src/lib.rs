//! Command-line front end for `hjlie`: configuration, commands and writers.

pub mod check;
pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run, Outcome};
pub use config::{load_config, Command, ConfigError, Format, RunConfig};
