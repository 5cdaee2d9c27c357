//! End-to-end runs of the bundled scene-summary fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fanout::manager::TaskOutcome;
use fanout::ops::cli::{main_with, parse_schema};
use fanout::ops::{structural_score, BenchmarkContract, Runtime, RuntimeConfig};
use fanout::state::Event;
use serde_json::Value as J;

use super::Outcome;

pub const SCENE_SCHEMA: &str = "scene_id:text,act:integer,scene:integer,location:text,text:text";
pub const OUTPUT_TABLES: [&str; 3] = ["scene_summaries", "act_summaries", "full_summary"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("romeo_and_juliet")
}

pub fn config(root: &Path) -> RuntimeConfig {
    let mut cfg = RuntimeConfig::load(&fixture_dir().join("fanout.toml")).unwrap();
    cfg.root = root.to_path_buf();
    cfg
}

pub fn query() -> String {
    std::fs::read_to_string(fixture_dir().join("query.txt")).unwrap()
}

pub fn contract() -> BenchmarkContract {
    BenchmarkContract::load(&fixture_dir().join("contract.toml")).unwrap()
}

/// Writes a config for a run rooted at `dir/run` and returns its path.
pub fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("fanout.toml");
    std::fs::write(&path, config(&dir.join("run")).to_toml()).unwrap();
    path
}

/// Runs the CLI in-process. Returns the exit code, stdout and stderr.
pub fn cli(config: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["fanout".to_string(), "--config".into(), config.display().to_string()];
    argv.extend(args.iter().map(|a| a.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

pub fn ingest_scenes(rt: &Runtime) {
    let schema = parse_schema(SCENE_SCHEMA).unwrap();
    rt.ingest(&fixture_dir().join("scenes.csv"), "scenes", schema, Some("scene_id")).unwrap();
}

fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap().block_on(f)
}

/// Serializations of the output tables as of the task's last checkpoint.
pub fn output_tables(rt: &Runtime, task: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let tables = rt.task_tables(task).map_err(|e| e.to_string())?;
    OUTPUT_TABLES
        .iter()
        .map(|name| {
            let t = tables.find_live(name).ok_or_else(|| format!("no table `{name}`"))?;
            Ok((name.to_string(), tables.serialization(&t.id).map_err(|e| e.to_string())?))
        })
        .collect()
}

fn events(rt: &Runtime, task: &str, kind: &str) -> Result<Vec<Event>, String> {
    Ok(rt.state().events(task, 0, usize::MAX).map_err(|e| e.to_string())?.into_iter().filter(|e| e.kind == kind).collect())
}

fn score(rt: &Runtime, task: &str) -> Result<f64, String> {
    let tables = rt.task_tables(task).map_err(|e| e.to_string())?;
    Ok(structural_score(&tables, &contract()).score)
}

/// Full run through the CLI, then a rerun in a fresh root.
pub fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path());
    let fx = fixture_dir();
    let scenes = fx.join("scenes.csv").display().to_string();
    let (code, _, err) = cli(&cfg, &["ingest", &scenes, "--name", "scenes", "--schema", SCENE_SCHEMA, "--id-column", "scene_id"]);
    if code != 0 {
        return Err(format!("ingest exited {code}: {err}"));
    }
    let query_file = fx.join("query.txt").display().to_string();
    let (code, _, err) = cli(&cfg, &["submit", "--query-file", &query_file]);
    if code != 0 {
        return Err(format!("submit exited {code}: {err}"));
    }
    let contract_file = fx.join("contract.toml").display().to_string();
    let (code, out, err) = cli(&cfg, &["score", "task-0001", "--contract", &contract_file]);
    if code != 0 {
        return Err(format!("score exited {code}: {err}"));
    }
    let report: J = serde_json::from_str(&out).map_err(|e| format!("score output: {e}"))?;
    if report["structural"].as_f64() != Some(1.0) {
        return Err(format!("structural score {}", report["structural"]));
    }

    let rt = Runtime::open(config(&dir.path().join("run"))).map_err(|e| e.to_string())?;
    let batches = events(&rt, "task-0001", "batch_started")?;
    if batches.len() != 3 {
        return Err(format!("{} batches dispatched", batches.len()));
    }
    let gates = events(&rt, "task-0001", "gate")?;
    let early = gates.iter().find(|g| g.payload["decision"] == "reject" && g.payload["transition"] == "finalize");
    let Some(early) = early else { return Err("no early finalization was rejected".into()) };
    let early_round = early.payload["round"].as_u64().unwrap_or_default();
    let last_batch_round = batches.iter().filter_map(|b| events_round(&rt, b)).max().unwrap_or_default();
    let finals: Vec<&Event> = gates.iter().filter(|g| g.payload["decision"] == "accept" && g.payload["transition"] == "finalize").collect();
    let final_round = finals.first().and_then(|g| g.payload["round"].as_u64()).unwrap_or_default();
    if early_round >= final_round || early_round > last_batch_round {
        return Err(format!("early finalize at round {early_round}, final at {final_round}"));
    }
    let first = output_tables(&rt, "task-0001")?;

    let again = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rt2 = Runtime::open(config(again.path())).map_err(|e| e.to_string())?;
    ingest_scenes(&rt2);
    let sub = block_on(rt2.submit(None, &query(), None)).map_err(|e| e.to_string())?;
    if !matches!(sub.outcome, TaskOutcome::Finalized { .. }) {
        return Err(format!("rerun ended {:?}", sub.outcome));
    }
    if output_tables(&rt2, &sub.task_id)? != first {
        return Err("rerun produced different results tables".into());
    }
    Ok(format!("3 batches, structural 1.0, finalize rejected at round {early_round} and accepted at {final_round}, rerun identical"))
}

fn events_round(rt: &Runtime, batch: &Event) -> Option<u64> {
    let started = rt.state().events(&batch.task_id, 0, usize::MAX).ok()?;
    started.iter().filter(|e| e.kind == "round_started" && e.seq < batch.seq).filter_map(|e| e.payload["round"].as_u64()).max()
}

/// Halts after round 2, reopens every store and resumes from the latest
/// checkpoint.
pub fn crash_recovery() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let task = {
        let rt = Runtime::open(config(dir.path())).map_err(|e| e.to_string())?;
        ingest_scenes(&rt);
        let sub = block_on(rt.submit(None, &query(), Some(2))).map_err(|e| e.to_string())?;
        if sub.outcome != (TaskOutcome::Halted { round: 2 }) {
            return Err(format!("first process ended {:?}", sub.outcome));
        }
        sub.task_id
    };
    let rt = Runtime::open(config(dir.path())).map_err(|e| e.to_string())?;
    let sub = block_on(rt.resume(&task, None)).map_err(|e| e.to_string())?;
    if !matches!(sub.outcome, TaskOutcome::Finalized { .. }) {
        return Err(format!("resumed process ended {:?}", sub.outcome));
    }
    let s = score(&rt, &task)?;
    if s != 1.0 {
        return Err(format!("structural score {s} after recovery"));
    }
    let runs = rt.state().runs(&task, None, 1, 1000).map_err(|e| e.to_string())?;
    let b2: Vec<_> = runs.items.iter().filter(|r| r.batch_id == "b2").collect();
    let b2_started = events(&rt, &task, "batch_started")?.iter().filter(|e| e.payload["batch"] == "b2").count();
    let retried = b2.iter().filter(|r| r.attempts.len() != 1).count();
    if b2.len() != 5 || b2_started != 1 || retried != 0 {
        return Err(format!("batch 2: {} runs, started {b2_started} times, {retried} re-executed", b2.len()));
    }
    if runs.total != 26 + 5 + 1 {
        return Err(format!("{} runs recorded", runs.total));
    }
    Ok(format!("halted after round 2, resumed, structural 1.0, batch 2 ran {} subtasks once", b2.len()))
}
