//! Command-line front end: configuration files, record documents, figures and subcommands.

pub mod commands;
pub mod config;
pub mod font;
pub mod plot;
pub mod record;

pub use commands::{exit_code, run, Cli};
pub use config::RunConfig;
