use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinSet;

use crate::registry::PresetStore;
use crate::state::{
    now_ms, Artifact, AttemptOutcome, AttemptRecord, Entity, RunMetrics, RunStatus, StateStore, SubtaskRunRecord,
    SubtaskSpecRecord,
};
use crate::table::{Field, FieldType, Record, Schema, TableId, TableStore, Value, LINEAGE_COLUMNS};

use super::template::{expand, ExecutionMode, StagedEntry, SubtaskSpec};
use super::{classify_error, ErrorClass, FabricError, Failure, SubtaskRunner, WorkerOutput};

pub const DEFAULT_TIMEOUT_MS: u64 = 300_000;
pub const DEFAULT_LLM_ONLY_CAP: usize = 256;
pub const DEFAULT_SUB_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub max_attempts: u32,
    pub default_timeout_ms: u64,
    /// Full-agent slots per node.
    pub nodes: BTreeMap<String, usize>,
    pub llm_only_cap: usize,
    /// llm-only specs sharing one worker process.
    pub sub_batch: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            max_attempts: crate::state::DEFAULT_MAX_ATTEMPTS,
            default_timeout_ms: DEFAULT_TIMEOUT_MS,
            nodes: BTreeMap::from([("node-0".to_string(), 4)]),
            llm_only_cap: DEFAULT_LLM_ONLY_CAP,
            sub_batch: DEFAULT_SUB_BATCH,
        }
    }
}

impl ExecutorConfig {
    fn check(&self) -> Result<(), FabricError> {
        let bad = |m: &str| Err(FabricError::InvalidSlots(m.to_string()));
        if self.nodes.is_empty() {
            return bad("at least one node is required");
        }
        if self.nodes.values().any(|&n| n == 0) {
            return bad("every node needs at least one slot");
        }
        if self.llm_only_cap == 0 || self.sub_batch == 0 {
            return bad("llm-only cap and sub-batch size must be positive");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

/// Highest concurrency observed since the last reset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConcurrencyStats {
    pub peak_per_node: BTreeMap<String, usize>,
    pub peak_llm_only: usize,
}

#[derive(Default)]
struct Gauges {
    active: BTreeMap<String, usize>,
    active_llm: usize,
    peak: ConcurrencyStats,
}

struct SlotPool {
    sem: Arc<Semaphore>,
    free: Mutex<BTreeMap<String, usize>>,
}

struct Slot {
    pool: Arc<SlotPool>,
    gauges: Arc<Mutex<Gauges>>,
    node: Option<String>,
    _permit: OwnedSemaphorePermit,
}

impl Drop for Slot {
    fn drop(&mut self) {
        let mut g = self.gauges.lock().unwrap();
        match &self.node {
            Some(node) => {
                *self.pool.free.lock().unwrap().get_mut(node).unwrap() += 1;
                *g.active.get_mut(node).unwrap() -= 1;
            }
            None => g.active_llm -= 1,
        }
    }
}

/// Runs specs with per-node slot accounting, retries and timeouts.
pub struct Executor {
    config: Mutex<ExecutorConfig>,
    runner: Arc<dyn SubtaskRunner>,
    pool: Mutex<Arc<SlotPool>>,
    llm: Mutex<Arc<Semaphore>>,
    gauges: Arc<Mutex<Gauges>>,
}

fn pool_for(nodes: &BTreeMap<String, usize>) -> Arc<SlotPool> {
    Arc::new(SlotPool { sem: Arc::new(Semaphore::new(nodes.values().sum())), free: Mutex::new(nodes.clone()) })
}

impl Executor {
    pub fn new(config: ExecutorConfig, runner: Arc<dyn SubtaskRunner>) -> Result<Executor, FabricError> {
        config.check()?;
        Ok(Executor {
            pool: Mutex::new(pool_for(&config.nodes)),
            llm: Mutex::new(Arc::new(Semaphore::new(config.llm_only_cap))),
            config: Mutex::new(config),
            runner,
            gauges: Arc::default(),
        })
    }

    pub fn config(&self) -> ExecutorConfig {
        self.config.lock().unwrap().clone()
    }

    /// Replaces the slot map. Takes effect for the next dispatch.
    pub fn configure_slots(&self, nodes: BTreeMap<String, usize>) -> Result<(), FabricError> {
        let mut cfg = self.config.lock().unwrap();
        let next = ExecutorConfig { nodes, ..cfg.clone() };
        next.check()?;
        *self.pool.lock().unwrap() = pool_for(&next.nodes);
        *cfg = next;
        Ok(())
    }

    pub fn stats(&self) -> ConcurrencyStats {
        self.gauges.lock().unwrap().peak.clone()
    }

    pub fn reset_stats(&self) {
        self.gauges.lock().unwrap().peak = ConcurrencyStats::default();
    }

    async fn acquire(pool: Arc<SlotPool>, llm: Arc<Semaphore>, gauges: Arc<Mutex<Gauges>>, mode: ExecutionMode) -> Slot {
        match mode {
            ExecutionMode::FullAgent => {
                let permit = pool.sem.clone().acquire_owned().await.expect("slot semaphore closed");
                let node = {
                    let mut free = pool.free.lock().unwrap();
                    let (node, n) = free.iter_mut().filter(|(_, n)| **n > 0).max_by_key(|(_, n)| **n).expect("permit implies a free slot");
                    *n -= 1;
                    node.clone()
                };
                let mut g = gauges.lock().unwrap();
                let a = g.active.entry(node.clone()).or_default();
                *a += 1;
                let a = *a;
                let p = g.peak.peak_per_node.entry(node.clone()).or_default();
                *p = (*p).max(a);
                drop(g);
                Slot { pool, gauges, node: Some(node), _permit: permit }
            }
            ExecutionMode::LlmOnly => {
                let permit = llm.acquire_owned().await.expect("llm semaphore closed");
                let mut g = gauges.lock().unwrap();
                g.active_llm += 1;
                g.peak.peak_llm_only = g.peak.peak_llm_only.max(g.active_llm);
                drop(g);
                Slot { pool, gauges, node: None, _permit: permit }
            }
        }
    }

    /// Expands and runs every staged entry as one batch.
    pub async fn dispatch(&self, d: Dispatch<'_>, entries: &[StagedEntry]) -> Result<BatchResult, FabricError> {
        let started = Instant::now();
        let cfg = self.config();
        let specs = expand(entries, d.task_id, d.batch_id, d.tables, d.presets, cfg.default_timeout_ms)?;
        let mut outcomes: Vec<Option<Outcome>> = vec![None; specs.len()];

        if let Some(state) = d.state {
            let mut fresh = Vec::new();
            for (i, s) in specs.iter().enumerate() {
                if let Ok(run) = state.run(&s.subtask_id) {
                    outcomes[i] = Some(Outcome::from_record(&run));
                } else if state.spec(&s.subtask_id).is_err() {
                    fresh.push(Entity::Spec(SubtaskSpecRecord {
                        subtask_id: s.subtask_id.clone(),
                        task_id: s.task_id.clone(),
                        batch_id: s.batch_id.clone(),
                        spec: serde_json::to_value(s).expect("spec serializes"),
                    }));
                }
            }
            let payload = serde_json::json!({"batch": d.batch_id, "specs": specs.len(), "entries": entries.len()});
            fresh.push(Entity::Event(state.next_event(d.task_id, 0, "batch_started", payload)?));
            state.record_all(fresh)?;
        }

        let specs: Vec<Arc<SubtaskSpec>> = specs.into_iter().map(Arc::new).collect();
        let pending: Vec<usize> = (0..specs.len()).filter(|&i| outcomes[i].is_none()).collect();
        self.run_pending(&cfg, &specs, &pending, &mut outcomes).await;
        let outcomes: Vec<Outcome> = outcomes.into_iter().map(|o| o.expect("every spec ran")).collect();

        let mut result = BatchResult { batch_id: d.batch_id.to_string(), ..Default::default() };
        let mut entities = Vec::new();
        for (s, o) in specs.iter().zip(&outcomes) {
            let status = if o.result.is_ok() { RunStatus::Success } else { RunStatus::LogicalFailure };
            result.subtasks.push(SubtaskSummary {
                subtask_id: s.subtask_id.clone(),
                entry: s.entry.clone(),
                status,
                attempts: o.attempts.len() as u32,
                error: o.result.as_ref().err().cloned(),
                worker: o.worker.clone(),
            });
            let m = &mut result.metrics;
            m.specs += 1;
            m.attempts += o.attempts.len() as u32;
            match &o.result {
                Ok(w) => {
                    m.succeeded += 1;
                    m.input_tokens += w.usage.input_tokens;
                    m.output_tokens += w.usage.output_tokens;
                }
                Err(_) => m.failed += 1,
            }
            if o.reused {
                continue;
            }
            let mut artifact_ids = Vec::new();
            if let Ok(w) = &o.result {
                for a in &w.artifacts {
                    let id = format!("{}:{}", s.subtask_id, a.name);
                    artifact_ids.push(id.clone());
                    entities.push(Entity::Artifact(Artifact {
                        artifact_id: id,
                        subtask_id: s.subtask_id.clone(),
                        task_id: s.task_id.clone(),
                        blob: a.blob.clone(),
                        name: a.name.clone(),
                        media_hint: a.media_hint.clone(),
                        preview: a.preview.clone(),
                    }));
                }
            }
            let run = SubtaskRunRecord {
                subtask_id: s.subtask_id.clone(),
                task_id: s.task_id.clone(),
                batch_id: s.batch_id.clone(),
                attempts: o.attempts.clone(),
                status,
                metrics: RunMetrics {
                    input_tokens: o.result.as_ref().map_or(0, |w| w.usage.input_tokens),
                    output_tokens: o.result.as_ref().map_or(0, |w| w.usage.output_tokens),
                    wall_ms: o.wall_ms,
                    reasks: o.result.as_ref().map_or(0, |w| w.reasks),
                },
                output: o.result.as_ref().ok().map(|w| w.output.clone()),
                artifacts: artifact_ids,
            };
            // Artifacts reference their run's spec, so runs go first.
            entities.insert(entities.iter().take_while(|e| matches!(e, Entity::Run(_))).count(), Entity::Run(run));
        }

        for entry in entries {
            let rows: Vec<(&SubtaskSpec, &Outcome)> =
                specs.iter().zip(&outcomes).filter(|(s, _)| s.entry == entry.id).map(|(s, o)| (s.as_ref(), o)).collect();
            let t = results_table(&d, entry, &rows, &mut result.notes)?;
            result.results.push(t);
        }

        result.metrics.retries = result.metrics.attempts.saturating_sub(result.metrics.specs as u32);
        result.metrics.wall_ms = started.elapsed().as_millis() as u64;
        let peaks = self.stats();
        result.metrics.peak_full_agent = peaks.peak_per_node.values().copied().max().unwrap_or(0);
        result.metrics.peak_llm_only = peaks.peak_llm_only;

        if let Some(state) = d.state {
            let payload = serde_json::json!({
                "batch": d.batch_id,
                "succeeded": result.metrics.succeeded,
                "failed": result.metrics.failed,
                "results": result.results.iter().map(|r| r.table.as_str()).collect::<Vec<_>>(),
            });
            entities.push(Entity::Event(state.next_event(d.task_id, 0, "batch_finished", payload)?));
            state.record_all(entities)?;
        }
        Ok(result)
    }

    async fn run_pending(&self, cfg: &ExecutorConfig, specs: &[Arc<SubtaskSpec>], pending: &[usize], outcomes: &mut [Option<Outcome>]) {
        let pool = self.pool.lock().unwrap().clone();
        let llm = self.llm.lock().unwrap().clone();
        let node_names: Vec<String> = cfg.nodes.keys().cloned().collect();
        let mut set: JoinSet<Vec<(usize, Outcome)>> = JoinSet::new();

        let ctx = |s: &Arc<SubtaskSpec>| RunCtx {
            runner: self.runner.clone(),
            pool: pool.clone(),
            llm: llm.clone(),
            gauges: self.gauges.clone(),
            max_attempts: cfg.max_attempts,
            spec: s.clone(),
        };

        let (llm_only, full): (Vec<usize>, Vec<usize>) = pending.iter().partition(|&&i| specs[i].mode == ExecutionMode::LlmOnly);
        for i in full {
            let c = ctx(&specs[i]);
            set.spawn(async move { vec![(i, c.run(None).await)] });
        }
        for (k, chunk) in llm_only.chunks(cfg.sub_batch).enumerate() {
            let worker = format!("{}/w{k}", node_names[k % node_names.len()]);
            let jobs: Vec<(usize, RunCtx)> = chunk.iter().map(|&i| (i, ctx(&specs[i]))).collect();
            set.spawn(async move {
                let mut inner = JoinSet::new();
                for (i, c) in jobs {
                    let w = worker.clone();
                    inner.spawn(async move { (i, c.run(Some(w)).await) });
                }
                let mut out = Vec::new();
                while let Some(r) = inner.join_next().await {
                    out.push(r.expect("spec task panicked"));
                }
                out
            });
        }
        while let Some(r) = set.join_next().await {
            for (i, o) in r.expect("spec task panicked") {
                outcomes[i] = Some(o);
            }
        }
    }
}

struct RunCtx {
    runner: Arc<dyn SubtaskRunner>,
    pool: Arc<SlotPool>,
    llm: Arc<Semaphore>,
    gauges: Arc<Mutex<Gauges>>,
    max_attempts: u32,
    spec: Arc<SubtaskSpec>,
}

impl RunCtx {
    async fn run(self, worker: Option<String>) -> Outcome {
        let first = now_ms();
        let mut attempts = Vec::new();
        let mut last_worker = worker.clone().unwrap_or_default();
        let mut result = Err(String::new());
        for attempt in 1..=self.max_attempts {
            let slot = Executor::acquire(self.pool.clone(), self.llm.clone(), self.gauges.clone(), self.spec.mode).await;
            let w = worker.clone().or_else(|| slot.node.as_ref().map(|n| format!("{n}/s{}", self.spec.subtask_id))).unwrap_or_default();
            last_worker = w.clone();
            let started_ms = now_ms();
            let timeout = Duration::from_millis(self.spec.timeout_ms);
            let res = match tokio::time::timeout(timeout, self.runner.run(self.spec.clone(), attempt, w)).await {
                Ok(r) => r.and_then(|out| check_output(&self.spec.output_schema, out)),
                Err(_) => Err(Failure::Timeout(self.spec.timeout_ms)),
            };
            drop(slot);
            let ended_ms = now_ms();
            match res {
                Ok(out) => {
                    attempts.push(AttemptRecord { attempt, started_ms, ended_ms, outcome: AttemptOutcome::Success, error: None });
                    result = Ok(out);
                    break;
                }
                Err(f) => {
                    let class = classify_error(&f);
                    let outcome = match (&f, class) {
                        (Failure::Timeout(_), _) => AttemptOutcome::Timeout,
                        (_, ErrorClass::Transient) => AttemptOutcome::TransientFailure,
                        (_, ErrorClass::Logical) => AttemptOutcome::LogicalFailure,
                    };
                    tracing::debug!(subtask = %self.spec.subtask_id, attempt, error = %f, "attempt failed");
                    attempts.push(AttemptRecord { attempt, started_ms, ended_ms, outcome, error: Some(f.to_string()) });
                    result = Err(match class {
                        ErrorClass::Transient if attempt == self.max_attempts => {
                            format!("gave up after {attempt} attempts: {f}")
                        }
                        _ => f.to_string(),
                    });
                    if class == ErrorClass::Logical {
                        break;
                    }
                }
            }
        }
        Outcome { attempts, result, worker: last_worker, wall_ms: now_ms().saturating_sub(first), reused: false }
    }
}

fn check_output(schema: &Schema, out: WorkerOutput) -> Result<WorkerOutput, Failure> {
    schema.validate_json(&out.output).map_err(|r| Failure::InvalidOutput(r.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone)]
struct Outcome {
    attempts: Vec<AttemptRecord>,
    result: Result<WorkerOutput, String>,
    worker: String,
    wall_ms: u64,
    reused: bool,
}

impl Outcome {
    fn from_record(run: &SubtaskRunRecord) -> Outcome {
        let result = match (&run.status, &run.output) {
            (RunStatus::Success, Some(output)) => Ok(WorkerOutput {
                output: output.clone(),
                artifacts: vec![],
                usage: crate::llm::Usage { input_tokens: run.metrics.input_tokens, output_tokens: run.metrics.output_tokens },
                reasks: run.metrics.reasks,
            }),
            _ => Err(run.attempts.last().and_then(|a| a.error.clone()).unwrap_or_else(|| "failed".into())),
        };
        Outcome { attempts: run.attempts.clone(), result, worker: String::new(), wall_ms: run.metrics.wall_ms, reused: true }
    }
}

fn results_table(d: &Dispatch<'_>, entry: &StagedEntry, rows: &[(&SubtaskSpec, &Outcome)], notes: &mut Vec<String>) -> Result<ResultsTable, FabricError> {
    let mut fields = vec![
        Field::new(LINEAGE_COLUMNS[0], FieldType::Text),
        Field::nullable(LINEAGE_COLUMNS[1], FieldType::Text),
        Field::nullable(LINEAGE_COLUMNS[2], FieldType::Text),
    ];
    fields.extend(entry.template.output_schema.fields().iter().cloned());
    let schema = Schema::new(fields)?;
    let mut records = Vec::new();
    for (s, o) in rows {
        let Ok(w) = &o.result else { continue };
        let values = entry.template.output_schema.validate_json(&w.output).map_err(|r| FabricError::InvalidTemplate(r.to_string()))?;
        let mut r = Record::new(s.subtask_id.clone()).with(LINEAGE_COLUMNS[0], s.subtask_id.clone());
        let (tbl, row) = match &s.source {
            Some(src) => (Value::Text(src.table.to_string()), Value::Text(src.row.as_str().to_string())),
            None => (Value::Null, Value::Null),
        };
        r = r.with(LINEAGE_COLUMNS[1], tbl).with(LINEAGE_COLUMNS[2], row);
        for (k, v) in values {
            r = r.with(k, v);
        }
        records.push(r);
    }
    let mut name = entry.template.results_name.clone();
    if let Some(n) = &name {
        if d.tables.find_live(n).is_some() {
            notes.push(format!("results name `{n}` is taken; entry {} got a generated name", entry.id));
            name = None;
        }
    }
    let table = d.tables.register_results(name.as_deref(), d.batch_id, schema, records)?;
    Ok(ResultsTable { entry: entry.id.clone(), table: table.id, name: table.name, rows: table.row_count })
}

/// Everything a dispatch touches besides the executor itself.
#[derive(Clone, Copy)]
pub struct Dispatch<'a> {
    pub task_id: &'a str,
    pub batch_id: &'a str,
    pub tables: &'a TableStore,
    pub presets: &'a PresetStore,
    /// When set, specs, runs, artifacts and batch events are persisted.
    pub state: Option<&'a StateStore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSummary {
    pub subtask_id: String,
    pub entry: String,
    pub status: RunStatus,
    pub attempts: u32,
    pub error: Option<String>,
    pub worker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub entry: String,
    pub table: TableId,
    pub name: String,
    pub rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub specs: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub attempts: u32,
    pub retries: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_ms: u64,
    pub peak_full_agent: usize,
    pub peak_llm_only: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub batch_id: String,
    pub subtasks: Vec<SubtaskSummary>,
    pub results: Vec<ResultsTable>,
    pub metrics: BatchMetrics,
    pub notes: Vec<String>,
}

impl BatchResult {
    pub fn failures(&self) -> impl Iterator<Item = &SubtaskSummary> {
        self.subtasks.iter().filter(|s| s.status != RunStatus::Success)
    }

    /// Compact text for the manager's context.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut out = format!(
            "batch {}: {} subtasks, {} succeeded, {} failed, {} retries, {} ms\n",
            self.batch_id, m.specs, m.succeeded, m.failed, m.retries, m.wall_ms
        );
        for r in &self.results {
            out.push_str(&format!("results {} `{}` (entry {}): {} rows\n", r.table, r.name, r.entry, r.rows));
        }
        const SHOWN: usize = 10;
        for f in self.failures().take(SHOWN) {
            out.push_str(&format!("failed {}: {}\n", f.subtask_id, f.error.as_deref().unwrap_or("")));
        }
        if m.failed > SHOWN {
            out.push_str(&format!("... {} more failures\n", m.failed - SHOWN));
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}
