//! Durable control state: tasks, checkpoints, subtask specs and runs,
//! artifacts and a per-task event log.
//!
//! # On-disk layout
//!
//! ```text
//! <root>/journal.jsonl   write-ahead journal, one JSON line per commit
//! ```
//!
//! Each line is `{"commit": [<entity>, ...]}`; a commit of several entities
//! is written as one line and made durable with a single `fsync`, so it is
//! all-or-nothing across crashes. On open the journal is replayed in order.
//! A torn final line (crash during append) is discarded and truncated away;
//! a malformed line anywhere else is reported as corruption.

mod records;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{BlobStore, ContentId};

pub use records::{
    Artifact, AttemptOutcome, AttemptRecord, Entity, Event, ManagerCheckpoint, Page, RunMetrics, RunStatus,
    SubtaskRunRecord, SubtaskSpecRecord, TaskRecord, TaskStatus,
};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` already exists")]
    DuplicateTask(String),
    #[error("invalid transition for task `{task}`: {from:?} -> {to:?}")]
    InvalidTransition { task: String, from: TaskStatus, to: TaskStatus },
    #[error("checkpoint for task `{task}` round {round} already exists")]
    DuplicateCheckpoint { task: String, round: u32 },
    #[error("checkpoint round {round} for task `{task}` is not after round {latest}")]
    NonMonotonicRound { task: String, round: u32, latest: u32 },
    #[error("task `{0}` has no checkpoint")]
    NoCheckpoint(String),
    #[error("unknown subtask `{0}`")]
    UnknownSubtask(String),
    #[error("subtask spec `{0}` already recorded")]
    DuplicateSpec(String),
    #[error("run for subtask `{0}` already recorded")]
    DuplicateRun(String),
    #[error("unknown artifact `{0}`")]
    UnknownArtifact(String),
    #[error("artifact `{0}` already recorded")]
    DuplicateArtifact(String),
    #[error("blob {0} is not resolvable")]
    UnresolvableBlob(ContentId),
    #[error("event for task `{task}` has seq {got}, expected {expected}")]
    EventSequence { task: String, expected: u64, got: u64 },
    #[error("invalid run record for `{subtask}`: {reason}")]
    InvalidRun { subtask: String, reason: String },
    #[error("journal corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("state store I/O: {0}")]
    Io(#[from] io::Error),
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
struct Commit {
    commit: Vec<Entity>,
}

#[derive(Debug, Default, Clone)]
struct State {
    tasks: BTreeMap<String, TaskRecord>,
    checkpoints: BTreeMap<String, BTreeMap<u32, ManagerCheckpoint>>,
    specs: BTreeMap<String, SubtaskSpecRecord>,
    runs: BTreeMap<String, SubtaskRunRecord>,
    artifacts: BTreeMap<String, Artifact>,
    events: BTreeMap<String, Vec<Event>>,
}

impl State {
    fn task(&self, id: &str) -> Result<&TaskRecord, StateError> {
        self.tasks.get(id).ok_or_else(|| StateError::UnknownTask(id.to_string()))
    }

    fn check(&self, e: &Entity, max_attempts: u32, blobs: Option<&BlobStore>) -> Result<(), StateError> {
        match e {
            Entity::Task(t) => match self.tasks.get(&t.task_id) {
                None if t.status == TaskStatus::Running => Ok(()),
                None => Err(StateError::UnknownTask(t.task_id.clone())),
                Some(old) if old.status == TaskStatus::Running && t.status != TaskStatus::Running => Ok(()),
                Some(old) if old.status == TaskStatus::Running => Err(StateError::DuplicateTask(t.task_id.clone())),
                Some(old) => Err(StateError::InvalidTransition { task: t.task_id.clone(), from: old.status, to: t.status }),
            },
            Entity::Checkpoint(c) => {
                self.task(&c.task_id)?;
                let latest = self.checkpoints.get(&c.task_id).and_then(|m| m.keys().next_back().copied());
                match latest {
                    Some(l) if l == c.round || self.checkpoints[&c.task_id].contains_key(&c.round) => {
                        Err(StateError::DuplicateCheckpoint { task: c.task_id.clone(), round: c.round })
                    }
                    Some(l) if l > c.round => Err(StateError::NonMonotonicRound { task: c.task_id.clone(), round: c.round, latest: l }),
                    _ => Ok(()),
                }
            }
            Entity::Spec(s) => {
                self.task(&s.task_id)?;
                if self.specs.contains_key(&s.subtask_id) {
                    return Err(StateError::DuplicateSpec(s.subtask_id.clone()));
                }
                Ok(())
            }
            Entity::Run(r) => {
                let spec = self.specs.get(&r.subtask_id).ok_or_else(|| StateError::UnknownSubtask(r.subtask_id.clone()))?;
                if self.runs.contains_key(&r.subtask_id) {
                    return Err(StateError::DuplicateRun(r.subtask_id.clone()));
                }
                let invalid = |reason: String| StateError::InvalidRun { subtask: r.subtask_id.clone(), reason };
                if spec.task_id != r.task_id {
                    return Err(invalid("task id differs from its spec".into()));
                }
                if r.attempts.is_empty() || r.attempts.len() as u32 > max_attempts {
                    return Err(invalid(format!("{} attempts recorded, limit {max_attempts}", r.attempts.len())));
                }
                for (i, a) in r.attempts.iter().enumerate() {
                    if a.attempt != i as u32 + 1 {
                        return Err(invalid("attempt numbers must be 1, 2, ...".into()));
                    }
                }
                let successes = r.attempts.iter().filter(|a| a.outcome == AttemptOutcome::Success).count();
                if successes > 1 {
                    return Err(invalid("more than one successful attempt".into()));
                }
                if (successes == 1) != (r.status == RunStatus::Success) {
                    return Err(invalid("final status disagrees with attempts".into()));
                }
                if successes == 1 && r.attempts.last().map(|a| a.outcome) != Some(AttemptOutcome::Success) {
                    return Err(invalid("attempts continued after a success".into()));
                }
                Ok(())
            }
            Entity::Artifact(a) => {
                if !self.specs.contains_key(&a.subtask_id) {
                    return Err(StateError::UnknownSubtask(a.subtask_id.clone()));
                }
                if self.artifacts.contains_key(&a.artifact_id) {
                    return Err(StateError::DuplicateArtifact(a.artifact_id.clone()));
                }
                if let Some(b) = blobs {
                    if !b.contains(&a.blob.id) {
                        return Err(StateError::UnresolvableBlob(a.blob.id));
                    }
                }
                Ok(())
            }
            Entity::Event(ev) => {
                self.task(&ev.task_id)?;
                let expected = self.events.get(&ev.task_id).map_or(1, |v| v.len() as u64 + 1);
                if ev.seq != expected {
                    return Err(StateError::EventSequence { task: ev.task_id.clone(), expected, got: ev.seq });
                }
                Ok(())
            }
        }
    }

    fn apply(&mut self, e: Entity) {
        match e {
            Entity::Task(t) => {
                self.tasks.insert(t.task_id.clone(), t);
            }
            Entity::Checkpoint(c) => {
                self.checkpoints.entry(c.task_id.clone()).or_default().insert(c.round, c);
            }
            Entity::Spec(s) => {
                self.specs.insert(s.subtask_id.clone(), s);
            }
            Entity::Run(r) => {
                self.runs.insert(r.subtask_id.clone(), r);
            }
            Entity::Artifact(a) => {
                self.artifacts.insert(a.artifact_id.clone(), a);
            }
            Entity::Event(ev) => self.events.entry(ev.task_id.clone()).or_default().push(ev),
        }
    }
}

struct Inner {
    state: State,
    journal: File,
}

/// The durable state store. Cheap to share behind an `Arc`; every write
/// is serialized and fsynced before it returns.
pub struct StateStore {
    root: PathBuf,
    max_attempts: u32,
    blobs: Option<Arc<BlobStore>>,
    inner: Mutex<Inner>,
}

impl StateStore {
    pub fn open(root: impl AsRef<Path>) -> Result<StateStore, StateError> {
        Self::open_with(root, DEFAULT_MAX_ATTEMPTS, None)
    }

    /// Opens the store, replaying the journal. When `blobs` is given,
    /// artifact blobs are checked for presence on record.
    pub fn open_with(root: impl AsRef<Path>, max_attempts: u32, blobs: Option<Arc<BlobStore>>) -> Result<StateStore, StateError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let path = root.join(JOURNAL_FILE);
        let mut journal = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let mut state = State::default();
        let mut good_len = 0u64;
        let mut pending: Option<(usize, String)> = None;
        {
            let mut reader = BufReader::new(&journal);
            let mut line = String::new();
            let mut n = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line)?;
                if read == 0 {
                    break;
                }
                n += 1;
                if let Some((ln, reason)) = pending.take() {
                    return Err(StateError::Corrupt { line: ln, reason });
                }
                let complete = line.ends_with('\n');
                match serde_json::from_str::<Commit>(line.trim_end()) {
                    Ok(c) if complete => {
                        for e in c.commit {
                            state.apply(e);
                        }
                        good_len += read as u64;
                    }
                    Ok(_) => pending = Some((n, "unterminated line".into())),
                    Err(err) => pending = Some((n, err.to_string())),
                }
            }
        }
        if pending.is_some() {
            tracing::warn!("discarding torn journal tail in {}", path.display());
            journal.set_len(good_len)?;
            journal.seek(SeekFrom::End(0))?;
        }
        Ok(StateStore { root, max_attempts, blobs, inner: Mutex::new(Inner { state, journal }) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn max_attempts(&self) -> u32 {
        self.max_attempts
    }

    pub fn record(&self, entity: Entity) -> Result<(), StateError> {
        self.record_all(vec![entity])
    }

    /// Validates and durably records a set of entities as one commit. Either
    /// all of them are recorded or none.
    pub fn record_all(&self, entities: Vec<Entity>) -> Result<(), StateError> {
        if entities.is_empty() {
            return Ok(());
        }
        let mut inner = self.inner.lock().unwrap();
        let mut scratch: Option<State> = None;
        for (i, e) in entities.iter().enumerate() {
            let view = scratch.as_ref().unwrap_or(&inner.state);
            view.check(e, self.max_attempts, self.blobs.as_deref())?;
            if i + 1 < entities.len() {
                scratch.get_or_insert_with(|| inner.state.clone()).apply(e.clone());
            }
        }
        let mut line = serde_json::to_string(&Commit { commit: entities.clone() }).expect("entities serialize");
        line.push('\n');
        inner.journal.write_all(line.as_bytes())?;
        inner.journal.sync_data()?;
        for e in entities {
            inner.state.apply(e);
        }
        Ok(())
    }

    pub fn create_task(&self, task_id: &str, query: &str, inputs: Vec<crate::blob::BlobRef>) -> Result<TaskRecord, StateError> {
        if self.inner.lock().unwrap().state.tasks.contains_key(task_id) {
            return Err(StateError::DuplicateTask(task_id.to_string()));
        }
        let t = TaskRecord {
            task_id: task_id.to_string(),
            query: query.to_string(),
            inputs,
            status: TaskStatus::Running,
            created_ms: now_ms(),
            finished_ms: None,
            report: None,
        };
        self.record(Entity::Task(t.clone()))?;
        Ok(t)
    }

    fn finish(&self, task_id: &str, status: TaskStatus, report: serde_json::Value) -> Result<TaskRecord, StateError> {
        let mut t = self.task(task_id)?;
        if t.status != TaskStatus::Running {
            return Err(StateError::InvalidTransition { task: task_id.to_string(), from: t.status, to: status });
        }
        t.status = status;
        t.finished_ms = Some(now_ms());
        t.report = Some(report);
        self.record(Entity::Task(t.clone()))?;
        Ok(t)
    }

    pub fn finalize_task(&self, task_id: &str, report: serde_json::Value) -> Result<TaskRecord, StateError> {
        self.finish(task_id, TaskStatus::Finalized, report)
    }

    pub fn fail_task(&self, task_id: &str, report: serde_json::Value) -> Result<TaskRecord, StateError> {
        self.finish(task_id, TaskStatus::Failed, report)
    }

    /// Appends an event, assigning the next sequence number for the task.
    pub fn append_event(&self, task_id: &str, kind: &str, payload: serde_json::Value) -> Result<Event, StateError> {
        let seq = {
            let inner = self.inner.lock().unwrap();
            inner.state.task(task_id)?;
            inner.state.events.get(task_id).map_or(1, |v| v.len() as u64 + 1)
        };
        let ev = Event { seq, ts_ms: now_ms(), task_id: task_id.to_string(), kind: kind.to_string(), payload };
        self.record(Entity::Event(ev.clone()))?;
        Ok(ev)
    }

    /// An event entity carrying the next sequence number after `extra`
    /// not-yet-recorded events, for inclusion in a larger commit.
    pub fn next_event(&self, task_id: &str, extra: u64, kind: &str, payload: serde_json::Value) -> Result<Event, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        let seq = inner.state.events.get(task_id).map_or(1, |v| v.len() as u64 + 1) + extra;
        Ok(Event { seq, ts_ms: now_ms(), task_id: task_id.to_string(), kind: kind.to_string(), payload })
    }

    pub fn task(&self, task_id: &str) -> Result<TaskRecord, StateError> {
        self.inner.lock().unwrap().state.task(task_id).cloned()
    }

    pub fn tasks(&self) -> Vec<TaskRecord> {
        self.inner.lock().unwrap().state.tasks.values().cloned().collect()
    }

    pub fn checkpoints(&self, task_id: &str) -> Result<Vec<ManagerCheckpoint>, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        Ok(inner.state.checkpoints.get(task_id).map(|m| m.values().cloned().collect()).unwrap_or_default())
    }

    pub fn recover_latest_checkpoint(&self, task_id: &str) -> Result<ManagerCheckpoint, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        inner
            .state
            .checkpoints
            .get(task_id)
            .and_then(|m| m.values().next_back().cloned())
            .ok_or_else(|| StateError::NoCheckpoint(task_id.to_string()))
    }

    pub fn spec(&self, subtask_id: &str) -> Result<SubtaskSpecRecord, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.specs.get(subtask_id).cloned().ok_or_else(|| StateError::UnknownSubtask(subtask_id.to_string()))
    }

    pub fn specs(&self, task_id: &str, batch_id: Option<&str>) -> Result<Vec<SubtaskSpecRecord>, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        Ok(inner
            .state
            .specs
            .values()
            .filter(|s| s.task_id == task_id && batch_id.is_none_or(|b| s.batch_id == b))
            .cloned()
            .collect())
    }

    pub fn run(&self, subtask_id: &str) -> Result<SubtaskRunRecord, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.runs.get(subtask_id).cloned().ok_or_else(|| StateError::UnknownSubtask(subtask_id.to_string()))
    }

    /// Runs for a task in subtask-id order, optionally filtered by status.
    pub fn runs(&self, task_id: &str, status: Option<RunStatus>, page: usize, page_size: usize) -> Result<Page<SubtaskRunRecord>, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        let all: Vec<SubtaskRunRecord> = inner
            .state
            .runs
            .values()
            .filter(|r| r.task_id == task_id && status.is_none_or(|s| r.status == s))
            .cloned()
            .collect();
        Ok(Page::of(all, page, page_size))
    }

    pub fn artifact(&self, artifact_id: &str) -> Result<Artifact, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.artifacts.get(artifact_id).cloned().ok_or_else(|| StateError::UnknownArtifact(artifact_id.to_string()))
    }

    pub fn artifacts(&self, task_id: &str, subtask_id: Option<&str>, page: usize, page_size: usize) -> Result<Page<Artifact>, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        let all: Vec<Artifact> = inner
            .state
            .artifacts
            .values()
            .filter(|a| a.task_id == task_id && subtask_id.is_none_or(|s| a.subtask_id == s))
            .cloned()
            .collect();
        Ok(Page::of(all, page, page_size))
    }

    /// Events with `seq > after`, at most `limit` of them.
    pub fn events(&self, task_id: &str, after: u64, limit: usize) -> Result<Vec<Event>, StateError> {
        let inner = self.inner.lock().unwrap();
        inner.state.task(task_id)?;
        Ok(inner
            .state
            .events
            .get(task_id)
            .map(|v| v.iter().skip(after as usize).take(limit).cloned().collect())
            .unwrap_or_default())
    }

    /// Writes the task's event log as JSON lines.
    pub fn export_events(&self, task_id: &str, out: &mut impl Write) -> Result<usize, StateError> {
        let events = self.events(task_id, 0, usize::MAX)?;
        for e in &events {
            serde_json::to_writer(&mut *out, e).map_err(io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(events.len())
    }
}
