//! Outer shell: configuration, dataset ingestion, checkpoints, metrics and
//! the command implementations behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod idx;
pub mod metrics;
pub mod synthetic;
