//! Desk-scale reproduction harness for `mpm-core`: scene generators, the
//! frame loop with per-phase timing rows, and binary position snapshots.

pub mod config;
pub mod run;
pub mod scene;
pub mod snapshot;

use std::path::PathBuf;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not an MPMF snapshot ({reason})")]
    Snapshot { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("frame {frame}: {source}")]
    Simulation { frame: u32, source: mpm_core::MpmError },
    #[error(transparent)]
    Setup(#[from] mpm_core::MpmError),
}
