//! Command-line front end: configuration files, task setup, the four
//! commands and the self-check suites.

pub mod checks;
pub mod commands;
pub mod config;
pub mod tasks;

pub use config::ExperimentConfig;
