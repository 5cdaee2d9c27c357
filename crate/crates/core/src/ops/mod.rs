//! Operator surface: runtime configuration, a local runtime over persistent
//! stores, the structural scorer and the command-line verbs.

pub mod cli;
mod config;
mod runtime;
pub mod score;

use thiserror::Error;

use crate::manager::ManagerError;
use crate::state::StateError;
use crate::table::TableError;

pub use config::{BackendConfig, RuntimeConfig, ServeConfig};
pub use runtime::{ReplayReport, Runtime, Submission};
pub use score::{structural_score, BenchmarkContract, Check, CheckKind, Reference, StructuralScore, Tier};

/// Exit codes of the `fanout` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NOT_FOUND: i32 = 3;
    pub const TASK_FAILED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum OpsError {
    #[error("config: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("task `{task}` failed: {reason}")]
    TaskFailed { task: String, reason: String },
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    State(StateError),
    #[error(transparent)]
    Table(TableError),
    #[error("{0}")]
    Other(String),
}

impl From<StateError> for OpsError {
    fn from(e: StateError) -> Self {
        match e {
            StateError::UnknownTask(_) | StateError::UnknownSubtask(_) | StateError::UnknownArtifact(_) | StateError::NoCheckpoint(_) => {
                OpsError::NotFound(e.to_string())
            }
            e => OpsError::State(e),
        }
    }
}

impl From<TableError> for OpsError {
    fn from(e: TableError) -> Self {
        match e {
            TableError::UnknownTable(_) | TableError::UnknownRow(_) => OpsError::NotFound(e.to_string()),
            e => OpsError::Table(e),
        }
    }
}

impl OpsError {
    pub fn exit_code(&self) -> i32 {
        match self {
            OpsError::Config(_) => exit::CONFIG,
            OpsError::NotFound(_) => exit::NOT_FOUND,
            OpsError::TaskFailed { .. } => exit::TASK_FAILED,
            OpsError::Manager(ManagerError::State(StateError::UnknownTask(_) | StateError::NoCheckpoint(_))) => exit::NOT_FOUND,
            _ => exit::OTHER,
        }
    }
}
