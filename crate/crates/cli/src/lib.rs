//! Experiment commands behind the `vpgc` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
