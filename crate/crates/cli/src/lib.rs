//! Pipeline commands: corpus generation, training, sampling, evaluation and
//! controllable generation.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, Cli, UsageError};
pub use config::RunConfig;
