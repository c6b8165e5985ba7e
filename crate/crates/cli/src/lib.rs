//! Command-line front end: synthetic data, training, inference, metrics,
//! window-size benchmark and attention dumps.

pub mod commands;
pub mod config;
pub mod formats;

pub use commands::{run, Cli, Command};
