//! Expands a table into one subtask per row and dispatches them through
//! the executor. Some rows fail transiently, some fail for good.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use fanout::blob::BlobStore;
use fanout::fabric::{
    Binding, Dispatch, ExecutionMode, Executor, ExecutorConfig, Failure, StagingArea, SubtaskRunner, SubtaskSpec, SubtaskTemplate,
    WorkerOutput,
};
use fanout::registry::{AgentPreset, PresetStore};
use fanout::state::StateStore;
use fanout::table::{Field, FieldType, Record, Schema, TableStore};
use serde_json::json;

/// Row `n` fails transiently `n % 3` times; multiples of 5 give up.
#[derive(Default)]
struct Flaky {
    seen: Mutex<HashMap<String, u32>>,
}

#[async_trait::async_trait]
impl SubtaskRunner for Flaky {
    async fn run(&self, spec: Arc<SubtaskSpec>, attempt: u32, worker: String) -> Result<WorkerOutput, Failure> {
        *self.seen.lock().unwrap().entry(spec.subtask_id.clone()).or_default() += 1;
        let n: u32 = spec.instruction.trim_start_matches("square ").parse().unwrap();
        if n.is_multiple_of(5) {
            return Err(Failure::Declared(format!("{worker} refuses {n}")));
        }
        if attempt <= n % 3 {
            return Err(Failure::Transport("connection reset".into()));
        }
        Ok(WorkerOutput { output: json!({"square": n * n}), artifacts: vec![], usage: Default::default(), reasks: 0 })
    }
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let tables = TableStore::new(Arc::new(BlobStore::open(dir.path().join("blobs"))?));
    let presets = PresetStore::from_presets(vec![AgentPreset::new("calc", "You compute.", vec![])]);
    let state = StateStore::open(dir.path().join("state"))?;
    state.create_task("demo", "square some numbers", vec![])?;

    let schema = Schema::new(vec![Field::new("n", FieldType::Integer)])?;
    let numbers = tables.register_leaf("numbers", schema, vec![], (1..=12).map(|n| Record::new(format!("n{n:02}")).with("n", n as i64)).collect())?;

    let template = SubtaskTemplate {
        preset: "calc".into(),
        instruction: "square {{n}}".into(),
        bindings: BTreeMap::from([("n".to_string(), Binding::Column { column: "n".into() })]),
        data_source: None,
        mode: Some(ExecutionMode::LlmOnly),
        output_schema: Schema::new(vec![Field::new("square", FieldType::Integer)])?,
        timeout_ms: Some(1000),
        results_name: Some("squares".into()),
    };
    let mut staging = StagingArea::new();
    staging.stage_dataset(template, &numbers.id, &tables, &presets)?;

    let runner = Arc::new(Flaky::default());
    let executor = Executor::new(ExecutorConfig { max_attempts: 3, ..Default::default() }, runner.clone())?;
    let d = Dispatch { task_id: "demo", batch_id: "b1", tables: &tables, presets: &presets, state: Some(&state) };
    let batch = executor.dispatch(d, &staging.take()).await?;

    println!("{}", batch.summary());
    for s in batch.failures() {
        println!("failed {} after {} attempt(s): {}", s.subtask_id, s.attempts, s.error.as_deref().unwrap_or(""));
    }
    let results = &batch.results[0];
    println!("results table `{}` has {} rows", results.name, results.rows);
    for r in &tables.data(&results.table)?.records {
        println!("  {}", r.to_json(None));
    }
    let calls: u32 = runner.seen.lock().unwrap().values().sum();
    println!("{calls} runner calls for 12 subtasks");
    Ok(())
}
