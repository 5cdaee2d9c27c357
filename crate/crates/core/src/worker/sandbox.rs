//! Full-agent sandboxes: a private workspace, a leader driven by the model,
//! helper services reachable only through the leader, and stateless tools.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, Weak};

use serde_json::{json, Value as J};
use thiserror::Error;
use tokio::io::AsyncWriteExt;

use crate::fabric::{input_marker, Failure, InputValue, ProducedArtifact, WorkerOutput};
use crate::llm::{Message, Reply, ToolCall, ToolSpec, Usage};
use crate::registry::{Capability, CapabilityKind};

use super::{validate_output, WorkerContext};

pub const LEADER: &str = "leader";
pub const OUTPUT_PATH: &str = "output/result.json";
pub const DEFAULT_STEP_BUDGET: u32 = 20;
pub const TOOL_RESULT_LIMIT: usize = 16 * 1024;
const PREVIEW_CHARS: usize = 200;

/// A stateless tool. Each invocation runs with the workspace as its root.
#[async_trait::async_trait]
pub trait ToolImpl: Send + Sync {
    async fn invoke(&self, args: &J, workspace: &Path) -> Result<String, String>;
}

/// A long-lived helper. Lives exactly as long as its sandbox.
#[async_trait::async_trait]
pub trait HelperService: Send + Sync {
    async fn handle(&self, from: &str, request: J) -> Result<J, String>;
    fn stop(&self) {}
}

pub struct ServiceEnv {
    pub sandbox: String,
    pub endpoint: String,
    pub workspace: PathBuf,
    pub router: RouterHandle,
}

pub trait ServiceFactory: Send + Sync {
    fn start(&self, cap: &Capability, env: ServiceEnv) -> Result<Arc<dyn HelperService>, String>;
}

/// Counts whitespace-separated words of `text` or of the file at `path`.
pub struct WordCount;

#[async_trait::async_trait]
impl ToolImpl for WordCount {
    async fn invoke(&self, args: &J, workspace: &Path) -> Result<String, String> {
        let text = match (args.get("text").and_then(J::as_str), args.get("path").and_then(J::as_str)) {
            (Some(t), _) => t.to_string(),
            (None, Some(p)) => {
                let path = resolve_in(workspace, p)?;
                tokio::fs::read_to_string(&path).await.map_err(|e| format!("{p}: {e}"))?
            }
            _ => return Err("word_count needs `text` or `path`".into()),
        };
        Ok(json!({"words": text.split_whitespace().count()}).to_string())
    }
}

/// Runs a program in the workspace with the arguments as JSON on stdin.
pub struct ExecTool {
    pub program: String,
    pub args: Vec<String>,
}

#[async_trait::async_trait]
impl ToolImpl for ExecTool {
    async fn invoke(&self, args: &J, workspace: &Path) -> Result<String, String> {
        let mut child = tokio::process::Command::new(&self.program)
            .args(&self.args)
            .current_dir(workspace)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| format!("cannot start `{}`: {e}", self.program))?;
        if let Some(mut stdin) = child.stdin.take() {
            stdin.write_all(args.to_string().as_bytes()).await.map_err(|e| e.to_string())?;
        }
        let out = child.wait_with_output().await.map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` exited with {}: {}", self.program, out.status, String::from_utf8_lossy(&out.stderr).trim()));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// Maps capability locators to implementations: `builtin:<name>` and
/// `exec:<program> [args]` for tools, `service:<name>` for services.
#[derive(Default, Clone)]
pub struct LauncherTable {
    tools: BTreeMap<String, Arc<dyn ToolImpl>>,
    services: BTreeMap<String, Arc<dyn ServiceFactory>>,
}

impl LauncherTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut t = Self::new();
        t.register_tool("word_count", Arc::new(WordCount));
        t
    }

    pub fn register_tool(&mut self, name: &str, tool: Arc<dyn ToolImpl>) {
        self.tools.insert(name.to_string(), tool);
    }

    pub fn register_service(&mut self, name: &str, factory: Arc<dyn ServiceFactory>) {
        self.services.insert(name.to_string(), factory);
    }

    pub fn tool_for(&self, cap: &Capability) -> Result<Arc<dyn ToolImpl>, String> {
        if let Some(name) = cap.locator.strip_prefix("builtin:") {
            return self.tools.get(name).cloned().ok_or_else(|| format!("no builtin tool `{name}`"));
        }
        if let Some(cmd) = cap.locator.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(|| format!("empty exec locator for `{}`", cap.id))?;
            return Ok(Arc::new(ExecTool { program, args: parts.collect() }));
        }
        Err(format!("cannot launch tool `{}` from locator `{}`", cap.id, cap.locator))
    }

    pub fn service_for(&self, cap: &Capability) -> Result<Arc<dyn ServiceFactory>, String> {
        let name = cap.locator.strip_prefix("service:").ok_or_else(|| format!("cannot launch service `{}` from locator `{}`", cap.id, cap.locator))?;
        self.services.get(name).cloned().ok_or_else(|| format!("no service factory `{name}`"))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RouteError {
    #[error("route {from} -> {to} is not allowed: helpers talk only to the leader")]
    Topology { from: String, to: String },
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("helper `{0}` failed: {1}")]
    Helper(String, String),
}

/// Message routing inside one sandbox. The only permitted routes are
/// leader to helper and helper to leader.
pub struct SandboxRouter {
    id: String,
    helpers: Mutex<BTreeMap<String, Arc<dyn HelperService>>>,
    inbox: Mutex<Vec<(String, J)>>,
}

impl SandboxRouter {
    pub fn new(id: impl Into<String>) -> Arc<Self> {
        Arc::new(SandboxRouter { id: id.into(), helpers: Mutex::default(), inbox: Mutex::default() })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn attach(&self, endpoint: &str, svc: Arc<dyn HelperService>) {
        self.helpers.lock().unwrap().insert(endpoint.to_string(), svc);
    }

    pub fn handle(self: &Arc<Self>, endpoint: &str) -> RouterHandle {
        RouterHandle { router: Arc::downgrade(self), me: endpoint.to_string() }
    }

    pub fn helpers(&self) -> Vec<String> {
        self.helpers.lock().unwrap().keys().cloned().collect()
    }

    fn known(&self, ep: &str) -> bool {
        ep == LEADER || self.helpers.lock().unwrap().contains_key(ep)
    }

    pub async fn send(&self, from: &str, to: &str, msg: J) -> Result<J, RouteError> {
        for ep in [from, to] {
            if !self.known(ep) {
                return Err(RouteError::UnknownEndpoint(ep.to_string()));
            }
        }
        if (from == LEADER) == (to == LEADER) {
            return Err(RouteError::Topology { from: from.to_string(), to: to.to_string() });
        }
        if to == LEADER {
            self.inbox.lock().unwrap().push((from.to_string(), msg));
            return Ok(json!({"delivered": true}));
        }
        let svc = self.helpers.lock().unwrap().get(to).cloned().expect("checked above");
        svc.handle(from, msg).await.map_err(|e| RouteError::Helper(to.to_string(), e))
    }

    pub fn drain_inbox(&self) -> Vec<(String, J)> {
        std::mem::take(&mut self.inbox.lock().unwrap())
    }

    pub fn stop_all(&self) {
        let helpers = std::mem::take(&mut *self.helpers.lock().unwrap());
        for svc in helpers.values().rev() {
            svc.stop();
        }
    }
}

/// A helper's view of its sandbox router.
#[derive(Clone)]
pub struct RouterHandle {
    router: Weak<SandboxRouter>,
    me: String,
}

impl RouterHandle {
    pub async fn send(&self, to: &str, msg: J) -> Result<J, RouteError> {
        let router = self.router.upgrade().ok_or_else(|| RouteError::UnknownEndpoint(to.to_string()))?;
        router.send(&self.me, to, msg).await
    }
}

/// Joins a relative path onto `root`, refusing anything that could leave it.
pub fn resolve_in(root: &Path, rel: &str) -> Result<PathBuf, String> {
    let p = Path::new(rel);
    if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(format!("path `{rel}` escapes the workspace"));
    }
    Ok(root.join(p))
}

pub fn sanitize_name(name: &str) -> Result<&str, String> {
    let ok = !name.is_empty() && !name.starts_with('.') && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if ok {
        Ok(name)
    } else {
        Err(format!("invalid name `{name}`"))
    }
}

struct Teardown {
    dir: PathBuf,
    router: Arc<SandboxRouter>,
}

impl Drop for Teardown {
    fn drop(&mut self) {
        self.router.stop_all();
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

/// Built-in tools every leader gets, before capability tools.
pub fn leader_tools() -> Vec<ToolSpec> {
    let t = |name: &str, description: &str, parameters: J| ToolSpec { name: name.into(), description: description.into(), parameters };
    vec![
        t("call_helper", "Send a request to a helper service and wait for its reply.", json!({"helper": "string", "request": "any"})),
        t("read_helper_messages", "Drain messages helpers have sent to the leader.", json!({})),
        t("list_files", "List files in the workspace.", json!({})),
        t("read_file", "Read a workspace file.", json!({"path": "string"})),
        t("write_file", "Write a workspace file.", json!({"path": "string", "content": "string"})),
        t("write_artifact", "Store a named artifact from `content` or a workspace `path`.", json!({"name": "string", "content": "string?", "path": "string?", "media_hint": "string?"})),
        t("write_output", "Write the final output object. It is validated against the output schema.", json!({"output": "object"})),
        t("declare_failure", "Give up on the subtask with a reason.", json!({"reason": "string"})),
    ]
}

fn truncate(mut s: String) -> String {
    if s.len() > TOOL_RESULT_LIMIT {
        let mut cut = TOOL_RESULT_LIMIT;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("\n[truncated]");
    }
    s
}

fn preview(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).chars().take(PREVIEW_CHARS).collect()
}

fn list_files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(rel) = p.strip_prefix(root) {
                out.push(rel.to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

enum Step {
    Result(String),
    Fail(String),
}

struct Leader<'a> {
    ctx: &'a WorkerContext,
    dir: &'a Path,
    router: &'a Arc<SandboxRouter>,
    tools: BTreeMap<String, Arc<dyn ToolImpl>>,
    artifacts: Vec<ProducedArtifact>,
}

impl Leader<'_> {
    async fn call(&mut self, c: &ToolCall) -> Step {
        match self.try_call(c).await {
            Ok(s) => s,
            Err(e) => Step::Result(format!("error: {e}")),
        }
    }

    async fn try_call(&mut self, c: &ToolCall) -> Result<Step, String> {
        let a = &c.arguments;
        let arg = |k: &str| a.get(k).and_then(J::as_str).ok_or_else(|| format!("`{}` needs string argument `{k}`", c.name));
        let out = match c.name.as_str() {
            "call_helper" => {
                let helper = arg("helper")?;
                let reply = self.router.send(LEADER, helper, a.get("request").cloned().unwrap_or(J::Null)).await.map_err(|e| e.to_string())?;
                reply.to_string()
            }
            "read_helper_messages" => {
                let msgs: Vec<J> = self.router.drain_inbox().into_iter().map(|(from, m)| json!({"from": from, "message": m})).collect();
                J::Array(msgs).to_string()
            }
            "list_files" => json!(list_files(self.dir)).to_string(),
            "read_file" => {
                let p = resolve_in(self.dir, arg("path")?)?;
                tokio::fs::read_to_string(&p).await.map_err(|e| e.to_string())?
            }
            "write_file" => {
                let p = resolve_in(self.dir, arg("path")?)?;
                if let Some(parent) = p.parent() {
                    tokio::fs::create_dir_all(parent).await.map_err(|e| e.to_string())?;
                }
                tokio::fs::write(&p, arg("content")?).await.map_err(|e| e.to_string())?;
                "ok".into()
            }
            "write_artifact" => {
                let name = sanitize_name(arg("name")?)?.to_string();
                let bytes = match (a.get("content").and_then(J::as_str), a.get("path").and_then(J::as_str)) {
                    (Some(c), _) => c.as_bytes().to_vec(),
                    (None, Some(p)) => tokio::fs::read(resolve_in(self.dir, p)?).await.map_err(|e| e.to_string())?,
                    _ => return Err("write_artifact needs `content` or `path`".into()),
                };
                let hint = a.get("media_hint").and_then(J::as_str).map(str::to_string);
                let blob = self.ctx.blobs.put(bytes.clone(), hint.clone()).await.map_err(|e| e.to_string())?;
                tokio::fs::write(self.dir.join("artifacts").join(&name), &bytes).await.map_err(|e| e.to_string())?;
                self.artifacts.retain(|x| x.name != name);
                self.artifacts.push(ProducedArtifact { name, blob: blob.clone(), media_hint: hint, preview: preview(&bytes) });
                json!({"blob": blob.id.to_hex(), "size": blob.size}).to_string()
            }
            "write_output" => {
                let output = a.get("output").cloned().ok_or("write_output needs `output`")?;
                let normalized = validate_output(&output, &self.ctx.spec().output_schema).map_err(|r| format!("output rejected: {r}"))?;
                tokio::fs::write(self.dir.join(OUTPUT_PATH), normalized.to_string()).await.map_err(|e| e.to_string())?;
                "output written".into()
            }
            "declare_failure" => return Ok(Step::Fail(arg("reason").unwrap_or("no reason given").to_string())),
            name => match self.tools.get(name) {
                Some(t) => t.invoke(a, self.dir).await?,
                None => return Err(format!("unknown tool `{name}`")),
            },
        };
        Ok(Step::Result(out))
    }
}

pub(super) async fn run(ctx: &WorkerContext, launchers: &LauncherTable, root: &Path, step_budget: u32) -> Result<WorkerOutput, Failure> {
    let spec = ctx.spec();
    let start = |e: String| Failure::SandboxStart(e);
    let dir = root.join(sanitize_name(&spec.subtask_id).map_err(start)?).join(format!("attempt-{}", ctx.attempt()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| start(e.to_string()))?;
    }
    for sub in ["inputs", "output", "artifacts"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| start(format!("{}: {e}", dir.display())))?;
    }
    let router = SandboxRouter::new(format!("{}#{}", spec.subtask_id, ctx.attempt()));
    let _teardown = Teardown { dir: dir.clone(), router: router.clone() };

    let mut instruction = spec.instruction.clone();
    for (name, input) in &spec.inputs {
        let name = sanitize_name(name).map_err(start)?;
        let bytes = match input {
            InputValue::Blob { blob } => {
                let bytes = ctx.blobs().get(blob).await?;
                instruction = instruction.replace(&input_marker(name), &format!("(see file inputs/{name})"));
                bytes
            }
            InputValue::Inline { value } => match value {
                J::String(s) => s.clone().into_bytes(),
                other => other.to_string().into_bytes(),
            },
        };
        std::fs::write(dir.join("inputs").join(name), bytes).map_err(|e| start(e.to_string()))?;
    }

    let mut tools = BTreeMap::new();
    let mut specs = leader_tools();
    for cap in ctx.capabilities() {
        match cap.kind {
            CapabilityKind::Service => {
                let factory = launchers.service_for(cap).map_err(start)?;
                let env = ServiceEnv { sandbox: router.id().to_string(), endpoint: cap.id.clone(), workspace: dir.clone(), router: router.handle(&cap.id) };
                let svc = factory.start(cap, env).map_err(start)?;
                router.attach(&cap.id, svc);
            }
            CapabilityKind::Tool => {
                tools.insert(cap.id.clone(), launchers.tool_for(cap).map_err(start)?);
                specs.push(ToolSpec { name: cap.id.clone(), description: cap.description.clone(), parameters: json!({}) });
            }
        }
    }

    let helpers = router.helpers();
    let system = format!(
        "{}\n\nYou lead a sandbox. Helpers: {}. Inputs are under inputs/. \
         Finish by calling write_output with an object with exactly these fields: {}.",
        spec.preset.prompt,
        if helpers.is_empty() { "none".to_string() } else { helpers.join(", ") },
        spec.output_schema.summary()
    );
    let mut messages = vec![Message::system(system), Message::user(instruction)];
    let mut leader = Leader { ctx, dir: &dir, router: &router, tools, artifacts: Vec::new() };
    let mut usage = Usage::default();
    let output_file = dir.join(OUTPUT_PATH);

    for step in 1..=step_budget {
        let req = ctx.request(messages.clone()).with_tools(specs.clone()).with_tag("mode", "full_agent").with_tag("step", step.to_string());
        let resp = ctx.gateway().complete(req).await?;
        usage.input_tokens += resp.usage.input_tokens;
        usage.output_tokens += resp.usage.output_tokens;
        match resp.reply {
            Reply::ToolCalls { calls } => {
                messages.push(Message::assistant_calls(calls.clone()));
                for c in &calls {
                    match leader.call(c).await {
                        Step::Result(r) => messages.push(Message::tool_result(c.id.clone(), truncate(r))),
                        Step::Fail(reason) => return Err(Failure::Declared(reason)),
                    }
                }
            }
            other => {
                messages.push(Message::assistant(other.render()));
                messages.push(Message::user("Continue using the tools. Finish by calling write_output."));
            }
        }
        if output_file.exists() {
            let text = std::fs::read_to_string(&output_file).map_err(|e| Failure::InvalidOutput(e.to_string()))?;
            let json: J = serde_json::from_str(&text).map_err(|e| Failure::InvalidOutput(format!("{OUTPUT_PATH}: {e}")))?;
            let output = validate_output(&json, &spec.output_schema).map_err(|r| Failure::InvalidOutput(r.to_string()))?;
            return Ok(WorkerOutput { output, artifacts: leader.artifacts, usage, reasks: 0 });
        }
    }
    Err(Failure::StepBudget(step_budget))
}
