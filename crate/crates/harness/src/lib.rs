//! Configuration, persistence and experiment drivers around `mrvpc-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod fsutil;
pub mod plot;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

/// Identifies the build that produced a report row.
pub const BUILD_ID: &str = env!("MRVPC_BUILD_ID");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] mrvpc_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit status: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use mrvpc_core::Error as E;
        match self {
            HarnessError::Config(_) | HarnessError::Core(E::Config(_)) => 2,
            HarnessError::Core(E::NonFinite { .. } | E::Check(_)) => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
