//! Desk-scale experiment harness around `fedins-core`: configuration files,
//! presets, runs with per-round metrics, checkpoints, sweeps and partition
//! audits. The `fedins` binary exposes these as subcommands.

pub mod checkpoint;
pub mod config;
mod error;
pub mod executor;
pub mod metrics;
pub mod presets;
pub mod runner;
pub mod stats;
pub mod sweep;
pub mod verify;

pub use error::{HarnessError, Result};
