//! One full-agent subtask driven by a scripted leader: it writes inside
//! its workspace, is refused a path outside it, publishes an artifact and
//! writes its structured output. Helper routing is shown separately.

use std::collections::BTreeMap;
use std::sync::Arc;

use fanout::blob::{BlobProxy, BlobStore};
use fanout::fabric::{Binding, Dispatch, ExecutionMode, Executor, ExecutorConfig, StagingArea, SubtaskTemplate};
use fanout::llm::{Fixture, Gateway, RateTable, ScriptedBackend};
use fanout::registry::{AgentPreset, PresetStore, Registry};
use fanout::table::{Field, FieldType, Record, Schema, TableStore};
use fanout::worker::{leader_tools, HelperService, SandboxRouter, WorkerRuntime, LEADER};
use serde_json::{json, Value as J};

struct Echo;

#[async_trait::async_trait]
impl HelperService for Echo {
    async fn handle(&self, from: &str, request: J) -> Result<J, String> {
        Ok(json!({"from": from, "echo": request}))
    }
}

fn call(name: &str, arguments: J) -> J {
    json!({"kind": "tool_calls", "calls": [{"name": name, "arguments": arguments}]})
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let blobs = Arc::new(BlobStore::open(dir.path().join("blobs"))?);
    let tables = TableStore::new(blobs.clone());
    let presets = PresetStore::from_presets(vec![AgentPreset::new("analyst", "You analyze one scene.", vec![])]);

    let fixture: Fixture = serde_json::from_value(json!({"rules": [{"responses": [
        call("write_file", json!({"path": "notes/plan.md", "content": "1. read the scene\n2. summarize"})),
        call("write_file", json!({"path": "../../elsewhere/plan.md", "content": "should not land"})),
        call("write_artifact", json!({"name": "plan.md", "path": "notes/plan.md", "media_hint": "text/markdown"})),
        call("write_output", json!({"output": {"summary": "Sampson and Gregory brawl in Verona."}})),
        {"kind": "text", "text": "done"}
    ]}]}))?;
    let gateway = Arc::new(Gateway::new(Arc::new(ScriptedBackend::new(fixture)), RateTable::default()));
    let proxy = Arc::new(BlobProxy::new(blobs.clone(), 1 << 20));
    let ws = dir.path().join("ws");
    let worker = WorkerRuntime::new(gateway, proxy, Arc::new(Registry::new()), &ws);

    let scenes = tables.register_leaf(
        "scenes",
        Schema::new(vec![Field::new("text", FieldType::Text)])?,
        vec![],
        vec![Record::new("1.1").with("text", "Enter SAMPSON and GREGORY, of the house of Capulet")],
    )?;
    let template = SubtaskTemplate {
        preset: "analyst".into(),
        instruction: "Summarize: {{text}}".into(),
        bindings: BTreeMap::from([("text".to_string(), Binding::Column { column: "text".into() })]),
        data_source: None,
        mode: Some(ExecutionMode::FullAgent),
        output_schema: Schema::new(vec![Field::new("summary", FieldType::Text)])?,
        timeout_ms: None,
        results_name: None,
    };
    let mut staging = StagingArea::new();
    staging.stage_dataset(template, &scenes.id, &tables, &presets)?;
    let executor = Executor::new(ExecutorConfig::default(), Arc::new(worker))?;
    let d = Dispatch { task_id: "demo", batch_id: "b1", tables: &tables, presets: &presets, state: None };
    let batch = executor.dispatch(d, &staging.take()).await?;

    for r in &tables.data(&batch.results[0].table)?.records {
        println!("output: {}", r.to_json(None));
    }
    let leaked = ws.join("elsewhere").exists();
    println!("escape attempt left a file outside the workspace: {leaked}");
    println!("leader tools: {}", leader_tools().iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", "));

    let router = SandboxRouter::new("demo");
    router.attach("search", Arc::new(Echo));
    router.attach("notes", Arc::new(Echo));
    println!("leader -> search: {}", router.send(LEADER, "search", json!({"q": "Verona"})).await?);
    println!("search -> notes: {}", router.send("search", "notes", json!({})).await.unwrap_err());
    router.stop_all();
    Ok(())
}
