//! Dataset IO, checkpoints, run configuration and the command-line
//! subcommands of the `lfra` tool.
//!
//! - [`dataset`]: PNG dataset directories
//! - [`checkpoint`]: versioned, checksummed weight files
//! - [`config`]: layered run configuration (defaults, flags, TOML file)
//! - [`report`]: metrics CSV, summaries, logs and run manifests
//! - [`commands`]: train, eval, predict, complexity, ablate, gradcheck

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
