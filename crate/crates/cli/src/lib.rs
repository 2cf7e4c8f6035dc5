//! Command-line front end: configuration, metrics and checkpoint files,
//! plotting, and the subcommands that tie the library together.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod plot;
