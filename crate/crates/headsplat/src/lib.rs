//! File formats, configuration, synthetic datasets and the command-line
//! driver for `headsplat-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod synth;

pub use error::{CliError, ErrorKind, Result};
