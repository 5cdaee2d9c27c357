//! Executor-level checks: retry matrix, expansion cardinality, throughput
//! and sandbox isolation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use fanout::blob::{BlobProxy, BlobStore};
use fanout::fabric::{
    expand, Binding, Dispatch, ExecutionMode, Executor, ExecutorConfig, Failure, StagedEntry, StagingArea, SubtaskRunner,
    SubtaskSpec, SubtaskTemplate, WorkerOutput,
};
use fanout::llm::{Fixture, Gateway, RateTable, ScriptedBackend};
use fanout::manager::tool_names;
use fanout::registry::{AgentPreset, PresetStore, Registry};
use fanout::state::{AttemptOutcome, RunStatus, StateStore};
use fanout::table::{Field, FieldType, Operator, Record, Schema, TableId, TableStore, Value, LINEAGE_COLUMNS};
use fanout::worker::{leader_tools, HelperService, RouteError, RouterHandle, SandboxRouter, WorkerRuntime, LEADER};
use serde_json::{json, Value as J};

use super::Outcome;

pub struct Env {
    pub dir: tempfile::TempDir,
    pub blobs: Arc<BlobStore>,
    pub tables: TableStore,
    pub presets: PresetStore,
}

pub fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let blobs = Arc::new(BlobStore::open(dir.path().join("blobs")).unwrap());
    let tables = TableStore::new(blobs.clone());
    let presets = PresetStore::from_presets(vec![AgentPreset::new("p", "You work.", vec![])]);
    Env { dir, blobs, tables, presets }
}

fn schema(fields: &[(&str, FieldType)]) -> Schema {
    Schema::new(fields.iter().map(|(n, t)| Field::new(*n, *t)).collect()).unwrap()
}

fn template(instruction: &str, column: &str, mode: ExecutionMode, out: &[(&str, FieldType)]) -> SubtaskTemplate {
    SubtaskTemplate {
        preset: "p".into(),
        instruction: instruction.into(),
        bindings: BTreeMap::from([(column.to_string(), Binding::Column { column: column.into() })]),
        data_source: None,
        mode: Some(mode),
        output_schema: schema(out),
        timeout_ms: None,
        results_name: None,
    }
}

fn stage(e: &Env, tpl: SubtaskTemplate, source: &TableId) -> Vec<StagedEntry> {
    let mut s = StagingArea::new();
    s.stage_dataset(tpl, source, &e.tables, &e.presets).unwrap();
    s.take()
}

fn numbers(e: &Env, n: usize) -> TableId {
    let records = (0..n).map(|i| Record::new(format!("r{i:05}")).with("n", i as i64).with("text", format!("row {i}"))).collect();
    e.tables.register_leaf("numbers", schema(&[("n", FieldType::Integer), ("text", FieldType::Text)]), vec![], records).unwrap().id
}

fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap().block_on(f)
}

/// Fails the first `n` attempts of a subtask whose instruction is
/// `kind:n`.
#[derive(Default)]
struct Faulty {
    calls: Mutex<HashMap<String, u32>>,
}

#[async_trait::async_trait]
impl SubtaskRunner for Faulty {
    async fn run(&self, spec: Arc<SubtaskSpec>, attempt: u32, _worker: String) -> Result<WorkerOutput, Failure> {
        *self.calls.lock().unwrap().entry(spec.instruction.clone()).or_default() += 1;
        let (kind, n) = spec.instruction.split_once(':').unwrap();
        if attempt <= n.parse::<u32>().unwrap() {
            match kind {
                "transient" => return Err(Failure::Transport("connection reset".into())),
                "timeout" => tokio::time::sleep(Duration::from_secs(30)).await,
                _ => return Err(Failure::Declared("cannot do this".into())),
            }
        }
        Ok(WorkerOutput { output: json!({"ok": true}), artifacts: vec![], usage: Default::default(), reasks: 0 })
    }
}

/// What the retry contract forces for `kind` failing the first `n`
/// attempts under `max` attempts.
pub fn expected_attempts(kind: &str, n: u32, max: u32) -> (RunStatus, Vec<AttemptOutcome>) {
    let fail = match kind {
        "transient" => AttemptOutcome::TransientFailure,
        "timeout" => AttemptOutcome::Timeout,
        _ => AttemptOutcome::LogicalFailure,
    };
    if n == 0 {
        return (RunStatus::Success, vec![AttemptOutcome::Success]);
    }
    if fail == AttemptOutcome::LogicalFailure {
        return (RunStatus::LogicalFailure, vec![fail]);
    }
    if n >= max {
        return (RunStatus::LogicalFailure, vec![fail; max as usize]);
    }
    let mut v = vec![fail; n as usize];
    v.push(AttemptOutcome::Success);
    (RunStatus::Success, v)
}

/// Dispatches one subtask per `kind:n` plan with `max` attempts allowed
/// and checks every run record against [`expected_attempts`]. Returns the
/// number of surfaced failures.
pub fn retry_cells(plans: &[String], max: u32) -> Result<usize, String> {
    let e = env();
    let records = plans.iter().enumerate().map(|(i, p)| Record::new(format!("r{i:03}")).with("plan", p.as_str())).collect();
    let source = e.tables.register_leaf("plans", schema(&[("plan", FieldType::Text)]), vec![], records).unwrap().id;
    let mut tpl = template("{{plan}}", "plan", ExecutionMode::LlmOnly, &[("ok", FieldType::Boolean)]);
    tpl.timeout_ms = Some(40);
    let entries = stage(&e, tpl, &source);

    let state = StateStore::open_with(e.dir.path().join("state"), max, None).map_err(|x| x.to_string())?;
    state.create_task("t", "retry matrix", vec![]).map_err(|x| x.to_string())?;
    let runner = Arc::new(Faulty::default());
    let ex = Executor::new(ExecutorConfig { max_attempts: max, ..Default::default() }, runner.clone()).map_err(|x| x.to_string())?;
    let d = Dispatch { task_id: "t", batch_id: "b1", tables: &e.tables, presets: &e.presets, state: Some(&state) };
    let result = block_on(ex.dispatch(d, &entries)).map_err(|x| x.to_string())?;

    let summaries: HashMap<&str, u32> = result.subtasks.iter().map(|s| (s.subtask_id.as_str(), s.attempts)).collect();
    let calls = runner.calls.lock().unwrap().clone();
    let runs = state.runs("t", None, 1, plans.len().max(1)).map_err(|x| x.to_string())?;
    if runs.total != plans.len() {
        return Err(format!("{} run records for {} subtasks", runs.total, plans.len()));
    }
    for run in &runs.items {
        let spec = state.spec(&run.subtask_id).map_err(|x| x.to_string())?;
        let plan = spec.spec["instruction"].as_str().unwrap_or_default().to_string();
        let (kind, n) = plan.split_once(':').unwrap();
        let (status, outcomes) = expected_attempts(kind, n.parse().unwrap(), max);
        let have: Vec<AttemptOutcome> = run.attempts.iter().map(|a| a.outcome).collect();
        let numbered = run.attempts.iter().map(|a| a.attempt).eq(1..=have.len() as u32);
        if run.status != status || have != outcomes || !numbered {
            return Err(format!("{plan} with {max} attempts: got {:?} {have:?}, expected {status:?} {outcomes:?}", run.status));
        }
        let same_plan = plans.iter().filter(|p| **p == plan).count();
        if summaries[run.subtask_id.as_str()] as usize != outcomes.len() || calls[&plan] as usize != outcomes.len() * same_plan {
            return Err(format!("{plan}: attempt count mismatch between record, summary and runner"));
        }
    }
    Ok(result.metrics.failed)
}

/// Fault-injection matrix over failure kinds and counts.
pub fn retry_matrix() -> Outcome {
    let kinds = ["transient", "logical", "timeout"];
    let plans: Vec<String> = kinds.iter().flat_map(|k| (0..=3).map(move |n| format!("{k}:{n}"))).collect();
    let failed = retry_cells(&plans, 3)?;
    Ok(format!("{} cells, {failed} surfaced failures, attempt counts exact", plans.len()))
}

/// Echoes `n`; fails logically when `n % 7 == 3`.
struct Echo;

#[async_trait::async_trait]
impl SubtaskRunner for Echo {
    async fn run(&self, spec: Arc<SubtaskSpec>, _attempt: u32, _worker: String) -> Result<WorkerOutput, Failure> {
        let n: i64 = spec.instruction.trim_start_matches("n=").parse().unwrap();
        if n % 7 == 3 {
            return Err(Failure::Declared(format!("{n} is unlucky")));
        }
        Ok(WorkerOutput { output: json!({"echo": n.to_string()}), artifacts: vec![], usage: Default::default(), reasks: 0 })
    }
}

pub fn expansion(sizes: &[usize]) -> Outcome {
    let mut details = Vec::new();
    for &n in sizes {
        let e = env();
        let source = numbers(&e, n);
        let entries = stage(&e, template("n={{n}}", "n", ExecutionMode::LlmOnly, &[("echo", FieldType::Text)]), &source);
        let specs = expand(&entries, "t", "b1", &e.tables, &e.presets, 1000).map_err(|x| x.to_string())?;
        let rows: BTreeSet<String> = specs.iter().filter_map(|s| s.source.as_ref().map(|r| r.row.to_string())).collect();
        if specs.len() != n || rows.len() != n {
            return Err(format!("{n} rows expanded to {} specs over {} distinct rows", specs.len(), rows.len()));
        }

        let ex = Executor::new(ExecutorConfig::default(), Arc::new(Echo)).map_err(|x| x.to_string())?;
        let d = Dispatch { task_id: "t", batch_id: "b1", tables: &e.tables, presets: &e.presets, state: None };
        let r = block_on(ex.dispatch(d, &entries)).map_err(|x| x.to_string())?;
        let expected_ok = (0..n).filter(|i| i % 7 != 3).count();
        let results = &r.results[0];
        if r.metrics.succeeded != expected_ok || results.rows != expected_ok {
            return Err(format!("{n} rows: {} successes, {} result rows, expected {expected_ok}", r.metrics.succeeded, results.rows));
        }
        let joined = e.tables.derive(None, Operator::ResultsWithSource, &[results.table.clone(), source.clone()]).map_err(|x| x.to_string())?;
        let data = e.tables.data(&joined.id).map_err(|x| x.to_string())?;
        if data.records.len() != expected_ok {
            return Err(format!("{n} rows: {} of {expected_ok} results joined back", data.records.len()));
        }
        let [_, src_table, src_row] = LINEAGE_COLUMNS;
        for rec in &data.records {
            let row = rec.get(src_row).render();
            let n_val = rec.get("n").render();
            if rec.get(src_table) != &Value::Text(source.to_string()) || row != format!("r{:05}", n_val.parse::<usize>().unwrap_or(usize::MAX)) {
                return Err(format!("{n} rows: orphan or misjoined row {}", rec.id));
            }
            if rec.get("echo").render() != n_val {
                return Err(format!("{n} rows: row {} carries another row's result", rec.id));
            }
        }
        details.push(format!("{n}->{expected_ok}"));
    }
    Ok(format!("specs == rows; joined successes {}; zero orphans", details.join(", ")))
}

fn scripted_worker(e: &Env, fixture: J, latency_ms: u64) -> WorkerRuntime {
    let fixture: Fixture = serde_json::from_value(fixture).unwrap();
    let backend = Arc::new(ScriptedBackend::new(fixture).with_latency(latency_ms));
    let gateway = Arc::new(Gateway::new(backend, RateTable::default()));
    let proxy = Arc::new(BlobProxy::new(e.blobs.clone(), 1 << 20));
    WorkerRuntime::new(gateway, proxy, Arc::new(Registry::new()), e.dir.path().join("ws"))
}

pub struct Throughput {
    pub parallel: Duration,
    pub serial: Duration,
    pub ideal: Duration,
    pub peak: usize,
}

/// Runs `n` llm-only specs at `cap` in real time, then the same batch at
/// cap 1 on a paused clock.
pub fn measure_throughput(n: usize, cap: usize, latency_ms: u64) -> Result<Throughput, String> {
    let fixture = json!({"rules": [{"responses": [{"kind": "object", "value": {"summary": "ok"}}]}]});
    let run = |cfg: ExecutorConfig, paused: bool| -> Result<(Duration, usize), String> {
        let e = env();
        let source = numbers(&e, n);
        let entries = stage(&e, template("Summarize {{text}}", "text", ExecutionMode::LlmOnly, &[("summary", FieldType::Text)]), &source);
        let ex = Executor::new(cfg, Arc::new(scripted_worker(&e, fixture.clone(), latency_ms))).map_err(|x| x.to_string())?;
        let d = Dispatch { task_id: "t", batch_id: "b1", tables: &e.tables, presets: &e.presets, state: None };
        let rt = if paused {
            tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build()
        } else {
            tokio::runtime::Builder::new_multi_thread().enable_all().build()
        }
        .map_err(|x| x.to_string())?;
        let (elapsed, r) = rt.block_on(async {
            let start = tokio::time::Instant::now();
            let r = ex.dispatch(d, &entries).await;
            (start.elapsed(), r)
        });
        let r = r.map_err(|x| x.to_string())?;
        if r.metrics.succeeded != n {
            return Err(format!("{} of {n} subtasks succeeded: {}", r.metrics.succeeded, r.summary()));
        }
        Ok((elapsed, r.metrics.peak_llm_only))
    };
    let wall = Instant::now();
    let (_, peak) = run(ExecutorConfig { llm_only_cap: cap, ..Default::default() }, false)?;
    let parallel = wall.elapsed();
    let (serial, _) = run(ExecutorConfig { llm_only_cap: 1, ..Default::default() }, true)?;
    let ideal = Duration::from_millis(n.div_ceil(cap) as u64 * latency_ms);
    Ok(Throughput { parallel, serial, ideal, peak })
}

pub fn throughput(n: usize, cap: usize, latency_ms: u64) -> Outcome {
    let t = measure_throughput(n, cap, latency_ms)?;
    let speedup = t.serial.as_secs_f64() / t.parallel.as_secs_f64();
    let detail = format!(
        "{n} subtasks at cap {cap}: {:.2}s (ideal {:.2}s, peak {}), serial {:.1}s, speedup {speedup:.0}x",
        t.parallel.as_secs_f64(),
        t.ideal.as_secs_f64(),
        t.peak,
        t.serial.as_secs_f64()
    );
    if t.parallel > t.ideal * 3 || speedup < 20.0 || t.peak > cap {
        return Err(detail);
    }
    Ok(detail)
}

struct Relay {
    router: RouterHandle,
}

#[async_trait::async_trait]
impl HelperService for Relay {
    async fn handle(&self, _from: &str, request: J) -> Result<J, String> {
        match request.get("relay_to").and_then(J::as_str) {
            Some(to) => Ok(json!({"relay": self.router.send(to, json!({"hello": 1})).await.map_err(|e| e.to_string()).err()})),
            None => Ok(json!({"echo": request})),
        }
    }
}

fn probe_fixture(ws: &std::path::Path) -> J {
    let mut rules = Vec::new();
    for (me, other) in [("t-b1-00001", "t-b1-00002"), ("t-b1-00002", "t-b1-00001")] {
        let abs = ws.join(other).join("attempt-1").join("output").join("result.json");
        let rel = format!("../../{other}/attempt-1/output/result.json");
        let tag = BTreeMap::from([("subtask".to_string(), me.to_string())]);
        rules.push(json!({
            "match": {"tags": tag, "contains": format!("path `{}` escapes the workspace", abs.display()), "last_contains": format!("path `{rel}` escapes the workspace")},
            "responses": [{"kind": "text", "text": "unused"}, {"kind": "tool_calls", "calls": [{"name": "write_output", "arguments": {"output": {"summary": "blocked"}}}]}]
        }));
        rules.push(json!({
            "match": {"tags": tag},
            "responses": [
                {"kind": "tool_calls", "delay_ms": 30, "calls": [
                    {"name": "write_file", "arguments": {"path": abs.display().to_string(), "content": "{\"summary\": \"overwritten\"}"}},
                    {"name": "write_file", "arguments": {"path": rel, "content": "{\"summary\": \"overwritten\"}"}}
                ]},
                {"kind": "tool_calls", "calls": [{"name": "write_output", "arguments": {"output": {"summary": "breached"}}}]}
            ]
        }));
    }
    rules.push(json!({
        "match": {"last_contains": "unknown tool `list_tables`"},
        "responses": [{"kind": "text", "text": "unused"}, {"kind": "tool_calls", "calls": [{"name": "write_output", "arguments": {"output": {"summary": "no catalog"}}}]}]
    }));
    rules.push(json!({"responses": [
        {"kind": "tool_calls", "calls": [{"name": "list_tables", "arguments": {}}]},
        {"kind": "tool_calls", "calls": [{"name": "write_output", "arguments": {"output": {"summary": "catalog reachable"}}}]}
    ]}));
    json!({"rules": rules})
}

/// Concurrent cross-write probes, helper-to-helper routing and the
/// worker-side catalog probe.
pub fn isolation() -> Outcome {
    let e = env();
    let ws: PathBuf = e.dir.path().join("ws");
    let worker = scripted_worker(&e, probe_fixture(&ws), 0);
    let cfg = ExecutorConfig { nodes: BTreeMap::from([("node-0".into(), 2)]), ..Default::default() };
    let ex = Executor::new(cfg, Arc::new(worker)).map_err(|x| x.to_string())?;
    let records = (0..3).map(|i| Record::new(format!("r{i}")).with("job", format!("job {i}"))).collect();
    let source = e.tables.register_leaf("jobs", schema(&[("job", FieldType::Text)]), vec![], records).unwrap().id;
    let entries = stage(&e, template("Do {{job}}", "job", ExecutionMode::FullAgent, &[("summary", FieldType::Text)]), &source);
    let d = Dispatch { task_id: "t", batch_id: "b1", tables: &e.tables, presets: &e.presets, state: None };
    let r = block_on(ex.dispatch(d, &entries)).map_err(|x| x.to_string())?;
    if ex.stats().peak_per_node.get("node-0").copied() != Some(2) {
        return Err("probe sandboxes did not run concurrently".into());
    }
    let data = e.tables.data(&r.results[0].table).map_err(|x| x.to_string())?;
    let summaries: BTreeMap<String, String> =
        data.records.iter().map(|rec| (rec.id.to_string(), rec.get("summary").render())).collect();
    let want = BTreeMap::from([
        ("t-b1-00001".to_string(), "blocked".to_string()),
        ("t-b1-00002".to_string(), "blocked".to_string()),
        ("t-b1-00003".to_string(), "no catalog".to_string()),
    ]);
    if summaries != want {
        return Err(format!("probe outcomes {summaries:?}"));
    }

    let router = SandboxRouter::new("sb");
    for id in ["a", "b"] {
        router.attach(id, Arc::new(Relay { router: router.handle(id) }));
    }
    let rt = tokio::runtime::Builder::new_current_thread().build().map_err(|x| x.to_string())?;
    let direct = rt.block_on(router.send("a", "b", json!({})));
    if !matches!(direct, Err(RouteError::Topology { .. })) {
        return Err(format!("helper a reached helper b: {direct:?}"));
    }
    let relayed = rt.block_on(router.send(LEADER, "a", json!({"relay_to": "b"}))).map_err(|x| x.to_string())?;
    if !relayed["relay"].as_str().is_some_and(|m| m.contains("not allowed")) {
        return Err(format!("relay through a helper was not refused: {relayed}"));
    }

    let leader: BTreeSet<String> = leader_tools().into_iter().map(|t| t.name).collect();
    let catalog: BTreeSet<String> = tool_names().into_iter().map(str::to_string).collect();
    let shared: Vec<&String> = leader.intersection(&catalog).collect();
    if !shared.is_empty() {
        return Err(format!("workers can call catalog tools {shared:?}"));
    }
    Ok(format!("2 concurrent cross-writes refused; helper->helper refused; {} worker tools, none touch the catalog", leader.len()))
}


/// Sleeps a per-row delay, echoes the row and fails logically on every
/// fifth row.
struct Jitter {
    delays: Vec<u64>,
}

#[async_trait::async_trait]
impl SubtaskRunner for Jitter {
    async fn run(&self, spec: Arc<SubtaskSpec>, _attempt: u32, _worker: String) -> Result<WorkerOutput, Failure> {
        let n: usize = spec.instruction.trim_start_matches("n=").parse().unwrap();
        tokio::time::sleep(Duration::from_millis(self.delays[n % self.delays.len()])).await;
        if n % 5 == 4 {
            return Err(Failure::Declared("skip".into()));
        }
        Ok(WorkerOutput { output: json!({"echo": format!("row {n}")}), artifacts: vec![], usage: Default::default(), reasks: 0 })
    }
}

/// What a batch leaves behind once timing is stripped: the results
/// serialization, per-subtask outcomes and the persisted run outputs.
#[derive(Debug, PartialEq)]
pub struct BatchContents {
    pub results: Vec<u8>,
    pub outcomes: Vec<(String, RunStatus, u32, Option<String>)>,
    pub outputs: BTreeMap<String, Option<J>>,
}

pub fn batch_contents(n: usize, delays: Vec<u64>, cap: usize, sub_batch: usize) -> Result<BatchContents, String> {
    let e = env();
    let source = numbers(&e, n);
    let entries = stage(&e, template("n={{n}}", "n", ExecutionMode::LlmOnly, &[("echo", FieldType::Text)]), &source);
    let state = StateStore::open(e.dir.path().join("state")).map_err(|x| x.to_string())?;
    state.create_task("t", "q", vec![]).map_err(|x| x.to_string())?;
    let cfg = ExecutorConfig { llm_only_cap: cap, sub_batch, ..Default::default() };
    let ex = Executor::new(cfg, Arc::new(Jitter { delays })).map_err(|x| x.to_string())?;
    let d = Dispatch { task_id: "t", batch_id: "b1", tables: &e.tables, presets: &e.presets, state: Some(&state) };
    let r = block_on(ex.dispatch(d, &entries)).map_err(|x| x.to_string())?;
    let table = &r.results[0].table;
    let data = e.tables.data(table).map_err(|x| x.to_string())?;
    for rec in &data.records {
        let run = state.run(rec.id.as_str()).map_err(|x| format!("results row {} has no run: {x}", rec.id))?;
        if run.status != RunStatus::Success || run.output != Some(json!({"echo": rec.get("echo").render()})) {
            return Err(format!("results row {} disagrees with its run", rec.id));
        }
        data.schema.check(rec).map_err(|x| x.to_string())?;
    }
    let mut outcomes: Vec<_> = r.subtasks.iter().map(|s| (s.subtask_id.clone(), s.status, s.attempts, s.error.clone())).collect();
    outcomes.sort_by(|a, b| a.0.cmp(&b.0));
    let runs = state.runs("t", None, 1, n.max(1)).map_err(|x| x.to_string())?;
    let outputs = runs.items.into_iter().map(|r| (r.subtask_id, r.output)).collect();
    Ok(BatchContents { results: e.tables.serialization(table).map_err(|x| x.to_string())?, outcomes, outputs })
}

/// Expands an `n`-row table and checks each spec points at its own row.
pub fn expansion_cardinality(n: usize) -> Result<(), String> {
    let e = env();
    let source = numbers(&e, n);
    let entries = stage(&e, template("n={{n}}", "n", ExecutionMode::LlmOnly, &[("echo", FieldType::Text)]), &source);
    let specs = expand(&entries, "t", "b1", &e.tables, &e.presets, 1000).map_err(|x| x.to_string())?;
    if specs.len() != n {
        return Err(format!("{n} rows gave {} specs", specs.len()));
    }
    let data = e.tables.data(&source).map_err(|x| x.to_string())?;
    for (s, rec) in specs.iter().zip(&data.records) {
        let src = s.source.as_ref().ok_or("spec without a source row")?;
        if src.table != source || src.row != rec.id || s.instruction != format!("n={}", rec.get("n").render()) {
            return Err(format!("spec {} does not match row {}", s.subtask_id, rec.id));
        }
    }
    let ids: BTreeSet<&str> = specs.iter().map(|s| s.subtask_id.as_str()).collect();
    if ids.len() != n {
        return Err("subtask ids repeat".into());
    }
    Ok(())
}
