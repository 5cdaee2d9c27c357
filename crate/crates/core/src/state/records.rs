//! Entities kept by the state store.

use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Running,
    Finalized,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub query: String,
    #[serde(default)]
    pub inputs: Vec<BlobRef>,
    pub status: TaskStatus,
    pub created_ms: u64,
    #[serde(default)]
    pub finished_ms: Option<u64>,
    /// Final or failure report, as produced by the manager.
    #[serde(default)]
    pub report: Option<serde_json::Value>,
}

/// Manager state at the end of a round. `round` is the round just completed;
/// a restarted manager continues with `round + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerCheckpoint {
    pub task_id: String,
    pub round: u32,
    pub plan: serde_json::Value,
    pub contract: serde_json::Value,
    /// Table catalog snapshot.
    pub catalog: BlobRef,
    pub staged: serde_json::Value,
    /// Anything else the manager needs to resume (presets, batch counter,
    /// last batch summary).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSpecRecord {
    pub subtask_id: String,
    pub task_id: String,
    pub batch_id: String,
    pub spec: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Success,
    TransientFailure,
    LogicalFailure,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub started_ms: u64,
    pub ended_ms: u64,
    pub outcome: AttemptOutcome,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    LogicalFailure,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_ms: u64,
    pub reasks: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskRunRecord {
    pub subtask_id: String,
    pub task_id: String,
    pub batch_id: String,
    pub attempts: Vec<AttemptRecord>,
    pub status: RunStatus,
    pub metrics: RunMetrics,
    #[serde(default)]
    pub output: Option<serde_json::Value>,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub artifact_id: String,
    pub subtask_id: String,
    pub task_id: String,
    pub blob: BlobRef,
    pub name: String,
    #[serde(default)]
    pub media_hint: Option<String>,
    pub preview: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub ts_ms: u64,
    pub task_id: String,
    pub kind: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entity", rename_all = "snake_case")]
pub enum Entity {
    Task(TaskRecord),
    Checkpoint(ManagerCheckpoint),
    Spec(SubtaskSpecRecord),
    Run(SubtaskRunRecord),
    Artifact(Artifact),
    Event(Event),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
}

impl<T: Clone> Page<T> {
    pub(crate) fn of(all: Vec<T>, page: usize, page_size: usize) -> Page<T> {
        let page = page.max(1);
        let page_size = page_size.max(1);
        let total = all.len();
        let start = ((page - 1) * page_size).min(total);
        let end = (start + page_size).min(total);
        Page { items: all[start..end].to_vec(), total, page, page_size }
    }
}
