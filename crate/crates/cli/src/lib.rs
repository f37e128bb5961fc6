//! Command-line pipeline: data generation, training, composition,
//! evaluation and plotting.

pub mod args;
pub mod commands;
pub mod error;
pub mod preset;

pub use commands::run;
pub use error::{CliError, Result};
