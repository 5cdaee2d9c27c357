use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde_json::json;

use super::*;
use crate::blob::{BlobProxy, BlobStore};
use crate::fabric::{InputValue, SubtaskSpec};
use crate::llm::{RateTable, ScriptedBackend};
use crate::registry::{AgentPreset, Capability, CapabilityKind, Registry};
use crate::table::{Field, FieldType};

struct Env {
    dir: tempfile::TempDir,
    store: Arc<BlobStore>,
    proxy: Arc<BlobProxy>,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(BlobStore::open(dir.path().join("blobs")).unwrap());
    let proxy = Arc::new(BlobProxy::new(store.clone(), 1 << 20));
    Env { dir, store, proxy }
}

fn runtime(e: &Env, fixture: serde_json::Value, registry: Registry, launchers: LauncherTable) -> WorkerRuntime {
    let backend = Arc::new(ScriptedBackend::new(serde_json::from_value(fixture).unwrap()));
    let gateway = Arc::new(Gateway::new(backend, RateTable::default()));
    WorkerRuntime::new(gateway, e.proxy.clone(), Arc::new(registry), e.dir.path().join("ws")).with_launchers(launchers)
}

fn spec(mode: ExecutionMode, caps: Vec<String>, inputs: BTreeMap<String, InputValue>, instruction: &str) -> Arc<SubtaskSpec> {
    Arc::new(SubtaskSpec {
        subtask_id: "t-b1-00001".into(),
        task_id: "t".into(),
        batch_id: "b1".into(),
        entry: "e1".into(),
        instruction: instruction.into(),
        inputs,
        preset: AgentPreset::new("p", "You work.", caps),
        mode,
        output_schema: Schema::new(vec![Field::new("summary", FieldType::Text)]).unwrap(),
        timeout_ms: 10_000,
        source: None,
    })
}

fn cap(id: &str, kind: CapabilityKind, locator: &str) -> Capability {
    Capability { id: id.into(), name: id.into(), description: format!("{id} capability"), kind, locator: locator.into() }
}

#[tokio::test]
async fn llm_only_inlines_blob_inputs_through_the_proxy() {
    let e = env();
    let body = e.store.put(b"Two households both alike in dignity").unwrap();
    let fixture = json!({"rules": [{"responses": [{"kind": "summarize", "words": 3, "field": "summary", "after": "TEXT:"}]}]});
    let rt = runtime(&e, fixture, Registry::new(), LauncherTable::with_builtins());
    let inputs = BTreeMap::from([("body".to_string(), InputValue::Blob { blob: body })]);
    let s = spec(ExecutionMode::LlmOnly, vec![], inputs, "Summarize. TEXT: [input:body]");
    let out = rt.run(s.clone(), 1, "w".into()).await.unwrap();
    assert_eq!(out.output, json!({"summary": "Two households both"}));
    let st = e.proxy.stats();
    assert_eq!(st.misses, 1);
    rt.run(s, 2, "w".into()).await.unwrap();
    assert_eq!(e.proxy.stats().hits, 1);
}

struct Recorder {
    log: Arc<Mutex<Vec<String>>>,
}

struct Upper {
    id: String,
    log: Arc<Mutex<Vec<String>>>,
    router: RouterHandle,
}

#[async_trait::async_trait]
impl HelperService for Upper {
    async fn handle(&self, from: &str, request: serde_json::Value) -> Result<serde_json::Value, String> {
        self.log.lock().unwrap().push(format!("handle {} from {from}", self.id));
        if request.get("poke").is_some() {
            let err = self.router.send("other", json!({})).await.unwrap_err();
            return Ok(json!({"poke": err.to_string()}));
        }
        Ok(json!({"upper": request["text"].as_str().unwrap_or_default().to_uppercase()}))
    }

    fn stop(&self) {
        self.log.lock().unwrap().push(format!("stop {}", self.id));
    }
}

impl ServiceFactory for Recorder {
    fn start(&self, cap: &Capability, env: ServiceEnv) -> Result<Arc<dyn HelperService>, String> {
        self.log.lock().unwrap().push(format!("start {}", cap.id));
        Ok(Arc::new(Upper { id: cap.id.clone(), log: self.log.clone(), router: env.router }))
    }
}

fn helper_setup(log: &Arc<Mutex<Vec<String>>>) -> (Registry, LauncherTable) {
    let registry = Registry::from_capabilities(vec![
        cap("upper", CapabilityKind::Service, "service:upper"),
        cap("other", CapabilityKind::Service, "service:upper"),
        cap("wc", CapabilityKind::Tool, "builtin:word_count"),
    ])
    .unwrap();
    let mut launchers = LauncherTable::with_builtins();
    launchers.register_service("upper", Arc::new(Recorder { log: log.clone() }));
    (registry, launchers)
}

#[tokio::test]
async fn full_agent_leader_uses_helpers_tools_and_writes_output() {
    let e = env();
    let log = Arc::new(Mutex::new(Vec::new()));
    let (registry, launchers) = helper_setup(&log);
    let fixture = json!({"rules": [{"responses": [
        {"kind": "tool_calls", "calls": [{"name": "read_file", "arguments": {"path": "inputs/body"}}]},
        {"kind": "tool_calls", "calls": [
            {"name": "call_helper", "arguments": {"helper": "upper", "request": {"text": "hi"}}},
            {"name": "call_helper", "arguments": {"helper": "upper", "request": {"poke": true}}},
            {"name": "wc", "arguments": {"path": "inputs/body"}}
        ]},
        {"kind": "tool_calls", "calls": [{"name": "write_artifact", "arguments": {"name": "notes.txt", "content": "draft notes", "media_hint": "text/plain"}}]},
        {"kind": "tool_calls", "calls": [{"name": "write_output", "arguments": {"output": {"summary": "done"}}}]}
    ]}]});
    let rt = runtime(&e, fixture, registry, launchers);
    let inputs = BTreeMap::from([("body".to_string(), InputValue::Inline { value: json!("one two three") })]);
    let s = spec(ExecutionMode::FullAgent, vec!["upper".into(), "other".into(), "wc".into()], inputs, "Do it.");
    let out = rt.run(s, 1, "n/s".into()).await.unwrap();
    assert_eq!(out.output, json!({"summary": "done"}));
    assert_eq!(out.artifacts.len(), 1);
    assert_eq!(e.store.get(&out.artifacts[0].blob).unwrap(), b"draft notes");
    let log = log.lock().unwrap().clone();
    assert_eq!(&log[..2], ["start upper", "start other"]);
    assert!(log.contains(&"handle upper from leader".to_string()));
    assert!(log.ends_with(&["stop upper".to_string(), "stop other".to_string()]));
    assert!(!rt.workspace_root().join("t-b1-00001").join("attempt-1").exists());
}

#[tokio::test]
async fn helpers_cannot_reach_each_other() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let router = SandboxRouter::new("sb");
    let f = Recorder { log: log.clone() };
    for id in ["a", "b"] {
        let env = ServiceEnv { sandbox: "sb".into(), endpoint: id.into(), workspace: PathBuf::new(), router: router.handle(id) };
        router.attach(id, f.start(&cap(id, CapabilityKind::Service, "service:x"), env).unwrap());
    }
    assert!(router.send(LEADER, "a", json!({"text": "x"})).await.is_ok());
    assert!(matches!(router.send("a", "b", json!({})).await, Err(RouteError::Topology { .. })));
    assert!(matches!(router.send(LEADER, LEADER, json!({})).await, Err(RouteError::Topology { .. })));
    assert!(matches!(router.send(LEADER, "zz", json!({})).await, Err(RouteError::UnknownEndpoint(_))));
    router.send("b", LEADER, json!({"note": 1})).await.unwrap();
    assert_eq!(router.drain_inbox().len(), 1);
}

#[tokio::test]
async fn catalog_tools_do_not_exist_for_workers() {
    let e = env();
    let fixture = json!({"rules": [
        {"match": {"last_contains": "unknown tool `list_tables`"}, "responses": [{"kind": "text", "text": "unused"}, {"kind": "tool_calls", "calls": [{"name": "declare_failure", "arguments": {"reason": "no catalog"}}]}]},
        {"responses": [{"kind": "tool_calls", "calls": [{"name": "list_tables", "arguments": {}}]}]}
    ]});
    let rt = runtime(&e, fixture, Registry::new(), LauncherTable::with_builtins());
    let err = rt.run(spec(ExecutionMode::FullAgent, vec![], BTreeMap::new(), "x"), 1, "w".into()).await.unwrap_err();
    assert_eq!(err, Failure::Declared("no catalog".into()));
}

#[tokio::test]
async fn step_budget_and_start_failures() {
    let e = env();
    let fixture = json!({"rules": [{"responses": [{"kind": "text", "text": "thinking"}]}]});
    let rt = runtime(&e, fixture.clone(), Registry::new(), LauncherTable::new()).with_step_budget(3);
    let err = rt.run(spec(ExecutionMode::FullAgent, vec![], BTreeMap::new(), "x"), 1, "w".into()).await.unwrap_err();
    assert_eq!(err, Failure::StepBudget(3));

    let registry = Registry::from_capabilities(vec![cap("svc", CapabilityKind::Service, "service:missing")]).unwrap();
    let rt = runtime(&e, fixture, registry, LauncherTable::new());
    let err = rt.run(spec(ExecutionMode::FullAgent, vec!["svc".into()], BTreeMap::new(), "x"), 1, "w".into()).await.unwrap_err();
    assert!(matches!(err, Failure::SandboxStart(_)));
}

#[tokio::test]
async fn invalid_output_is_logical() {
    let e = env();
    let fixture = json!({"rules": [{"responses": [
        {"kind": "tool_calls", "calls": [{"name": "write_output", "arguments": {"output": {"summary": 3}}}]},
        {"kind": "tool_calls", "calls": [{"name": "write_file", "arguments": {"path": "output/result.json", "content": "{\"extra\": 1}"}}]}
    ]}]});
    let rt = runtime(&e, fixture, Registry::new(), LauncherTable::new());
    let err = rt.run(spec(ExecutionMode::FullAgent, vec![], BTreeMap::new(), "x"), 1, "w".into()).await.unwrap_err();
    assert!(matches!(err, Failure::InvalidOutput(_)), "{err:?}");
}

#[test]
fn paths_stay_inside_the_workspace() {
    let root = Path::new("/ws/a");
    assert!(resolve_in(root, "../b/x").is_err());
    assert!(resolve_in(root, "/etc/passwd").is_err());
    assert!(resolve_in(root, "inputs/../../b").is_err());
    assert_eq!(resolve_in(root, "output/result.json").unwrap(), root.join("output/result.json"));
    assert!(sanitize_name("../x").is_err());
    assert!(sanitize_name("notes.txt").is_ok());
}

#[test]
fn output_validation_is_strict() {
    let schema = Schema::new(vec![Field::new("summary", FieldType::Text), Field::nullable("n", FieldType::Integer)]).unwrap();
    assert_eq!(validate_output(&json!({"summary": "s"}), &schema).unwrap(), json!({"summary": "s", "n": null}));
    let r = validate_output(&json!({"summary": 1, "x": 2}), &schema).unwrap_err();
    assert_eq!(r.fields(), vec!["summary", "x"]);
}
