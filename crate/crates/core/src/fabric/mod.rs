//! Subtask fabric: stage templates, expand them into specs, run the specs
//! under slot accounting with retries, and collect results tables.

mod executor;
mod template;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{BlobError, BlobRef};
use crate::llm::{LlmError, Usage};
use crate::registry::RegistryError;
use crate::state::StateError;
use crate::table::TableError;

pub use executor::{
    BatchMetrics, BatchResult, ConcurrencyStats, Dispatch, Executor, ExecutorConfig, ResultsTable, SubtaskSummary,
    DEFAULT_LLM_ONLY_CAP, DEFAULT_SUB_BATCH, DEFAULT_TIMEOUT_MS,
};
pub use template::{
    expand, input_marker, placeholders, Binding, ExecutionMode, InputValue, SourceRow, StagedEntry, StagingArea,
    SubtaskSpec, SubtaskTemplate, INLINE_LIMIT,
};

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("placeholder `{{{{{0}}}}}` has no binding")]
    UnresolvedPlaceholder(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown staged entry `{0}`")]
    UnknownEntry(String),
    #[error("table `{0}` is archived")]
    ArchivedSource(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid slot configuration: {0}")]
    InvalidSlots(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Why one attempt failed.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Failure {
    #[error("transport fault: {0}")]
    Transport(String),
    #[error("model backend unavailable: {0}")]
    Unavailable(String),
    #[error("sandbox failed to start: {0}")]
    SandboxStart(String),
    #[error("attempt timed out after {0} ms")]
    Timeout(u64),
    #[error("structured output invalid: {0}")]
    SchemaExhausted(String),
    #[error("output does not match the schema: {0}")]
    InvalidOutput(String),
    #[error("worker declared failure: {0}")]
    Declared(String),
    #[error("step budget of {0} exhausted without output")]
    StepBudget(u32),
    #[error("model refused: {0}")]
    Refused(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Transient,
    Logical,
}

/// Transient failures are retried; logical failures are surfaced at once.
pub fn classify_error(f: &Failure) -> ErrorClass {
    match f {
        Failure::Transport(_) | Failure::Unavailable(_) | Failure::SandboxStart(_) | Failure::Timeout(_) => ErrorClass::Transient,
        _ => ErrorClass::Logical,
    }
}

impl From<LlmError> for Failure {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Transport(m) => Failure::Transport(m),
            LlmError::Unavailable(m) => Failure::Unavailable(m),
            LlmError::Refused(m) => Failure::Refused(m),
            LlmError::SchemaValidation { report, .. } => Failure::SchemaExhausted(report),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<BlobError> for Failure {
    fn from(e: BlobError) -> Self {
        match e {
            BlobError::Unavailable(m) => Failure::Transport(format!("blob access: {m}")),
            e @ BlobError::ProxyUnreachable { .. } => Failure::Transport(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducedArtifact {
    pub name: String,
    pub blob: BlobRef,
    #[serde(default)]
    pub media_hint: Option<String>,
    pub preview: String,
}

/// A successful attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput {
    pub output: serde_json::Value,
    pub artifacts: Vec<ProducedArtifact>,
    pub usage: Usage,
    pub reasks: u32,
}

/// Executes one attempt of one spec. `worker` names the process slot the
/// attempt was placed on.
#[async_trait::async_trait]
pub trait SubtaskRunner: Send + Sync {
    async fn run(&self, spec: Arc<SubtaskSpec>, attempt: u32, worker: String) -> Result<WorkerOutput, Failure>;
}
