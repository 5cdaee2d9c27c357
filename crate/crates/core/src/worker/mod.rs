//! Worker runtime: executes one attempt of one subtask spec.
//!
//! Workers see only their spec, the blob proxy, the model gateway and the
//! capabilities of their preset. There is no path from a worker to the
//! table catalog:
//!
//! ```compile_fail
//! fn peek(ctx: &fanout::worker::WorkerContext) {
//!     let _ = ctx.tables();
//! }
//! ```

mod sandbox;

use std::path::PathBuf;
use std::sync::Arc;

use crate::blob::BlobAccess;
use crate::fabric::{input_marker, ExecutionMode, Failure, InputValue, SubtaskRunner, SubtaskSpec, WorkerOutput};
use crate::llm::{ChatRequest, Gateway, Message, ModelGrade, Reply};
use crate::registry::{Capability, CapabilitySource, RegistryError};
use crate::table::{Schema, ValidationReport, Value};

pub use sandbox::{
    leader_tools, resolve_in, sanitize_name, ExecTool, HelperService, LauncherTable, RouteError, RouterHandle, SandboxRouter,
    ServiceEnv, ServiceFactory, ToolImpl, WordCount, DEFAULT_STEP_BUDGET, LEADER, OUTPUT_PATH, TOOL_RESULT_LIMIT,
};

/// Validates a worker's output object against its schema and returns it
/// normalized.
pub fn validate_output(output: &serde_json::Value, schema: &Schema) -> Result<serde_json::Value, ValidationReport> {
    let values = schema.validate_json(output)?;
    Ok(serde_json::Value::Object(values.into_iter().map(|(k, v)| (k, Value::to_json(&v))).collect()))
}

/// What one attempt can reach.
pub struct WorkerContext {
    spec: Arc<SubtaskSpec>,
    attempt: u32,
    worker: String,
    capabilities: Vec<Capability>,
    blobs: Arc<dyn BlobAccess>,
    gateway: Arc<Gateway>,
}

impl WorkerContext {
    pub fn spec(&self) -> &SubtaskSpec {
        &self.spec
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn worker(&self) -> &str {
        &self.worker
    }

    pub fn capabilities(&self) -> &[Capability] {
        &self.capabilities
    }

    pub fn blobs(&self) -> &Arc<dyn BlobAccess> {
        &self.blobs
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    fn grade(&self) -> ModelGrade {
        self.spec.preset.model_hint.unwrap_or(ModelGrade::Worker)
    }

    fn request(&self, messages: Vec<Message>) -> ChatRequest {
        let s = &self.spec;
        ChatRequest::new(self.grade(), messages)
            .with_scope(s.task_id.clone())
            .with_scope(s.subtask_id.clone())
            .with_tag("subtask", s.subtask_id.clone())
            .with_tag("batch", s.batch_id.clone())
            .with_tag("entry", s.entry.clone())
            .with_tag("preset", s.preset.name.clone())
            .with_tag("attempt", self.attempt.to_string())
    }
}

pub struct WorkerRuntime {
    gateway: Arc<Gateway>,
    blobs: Arc<dyn BlobAccess>,
    capabilities: Arc<dyn CapabilitySource>,
    launchers: Arc<LauncherTable>,
    workspace_root: PathBuf,
    step_budget: u32,
}

impl WorkerRuntime {
    pub fn new(
        gateway: Arc<Gateway>,
        blobs: Arc<dyn BlobAccess>,
        capabilities: Arc<dyn CapabilitySource>,
        workspace_root: impl Into<PathBuf>,
    ) -> Self {
        WorkerRuntime {
            gateway,
            blobs,
            capabilities,
            launchers: Arc::new(LauncherTable::with_builtins()),
            workspace_root: workspace_root.into(),
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }

    pub fn with_launchers(mut self, launchers: LauncherTable) -> Self {
        self.launchers = Arc::new(launchers);
        self
    }

    pub fn with_step_budget(mut self, steps: u32) -> Self {
        self.step_budget = steps.max(1);
        self
    }

    pub fn workspace_root(&self) -> &std::path::Path {
        &self.workspace_root
    }

    /// Resolves the preset's capabilities and builds the attempt context.
    pub async fn context(&self, spec: Arc<SubtaskSpec>, attempt: u32, worker: String) -> Result<WorkerContext, Failure> {
        let source = self.capabilities.clone();
        let preset = spec.preset.clone();
        if preset.capabilities.is_empty() {
            return Ok(WorkerContext { spec, attempt, worker, capabilities: vec![], blobs: self.blobs.clone(), gateway: self.gateway.clone() });
        }
        let capabilities = tokio::task::spawn_blocking(move || preset.resolve(source.as_ref()))
            .await
            .map_err(|e| Failure::Other(e.to_string()))?
            .map_err(|e| match e {
                RegistryError::Remote { .. } => Failure::SandboxStart(e.to_string()),
                other => Failure::Other(other.to_string()),
            })?;
        Ok(WorkerContext { spec, attempt, worker, capabilities, blobs: self.blobs.clone(), gateway: self.gateway.clone() })
    }

    /// One structured completion with by-reference inputs fetched through
    /// the proxy and inlined.
    pub async fn run_llm_only(&self, ctx: &WorkerContext) -> Result<WorkerOutput, Failure> {
        let spec = ctx.spec();
        let mut text = spec.instruction.clone();
        for (name, input) in &spec.inputs {
            if let InputValue::Blob { blob } = input {
                let bytes = ctx.blobs.get(blob).await?;
                text = text.replace(&input_marker(name), &String::from_utf8_lossy(&bytes));
            }
        }
        let system = format!(
            "{}\n\nReply with a single JSON object with exactly these fields: {}.",
            spec.preset.prompt,
            spec.output_schema.summary()
        );
        let req = ctx.request(vec![Message::system(system), Message::user(text)]).with_schema(spec.output_schema.clone()).with_tag("mode", "llm_only");
        let resp = ctx.gateway.complete(req).await?;
        let Reply::Object { value } = resp.reply else {
            return Err(Failure::InvalidOutput("structured completion returned no object".into()));
        };
        let output = validate_output(&value, &spec.output_schema).map_err(|r| Failure::InvalidOutput(r.to_string()))?;
        Ok(WorkerOutput { output, artifacts: vec![], usage: resp.usage, reasks: resp.reasks })
    }

    /// Runs the leader loop inside a fresh sandbox.
    pub async fn run_full_agent(&self, ctx: &WorkerContext) -> Result<WorkerOutput, Failure> {
        sandbox::run(ctx, &self.launchers, &self.workspace_root, self.step_budget).await
    }
}

#[async_trait::async_trait]
impl SubtaskRunner for WorkerRuntime {
    async fn run(&self, spec: Arc<SubtaskSpec>, attempt: u32, worker: String) -> Result<WorkerOutput, Failure> {
        let ctx = self.context(spec, attempt, worker).await?;
        match ctx.spec.mode {
            ExecutionMode::LlmOnly => self.run_llm_only(&ctx).await,
            ExecutionMode::FullAgent => self.run_full_agent(&ctx).await,
        }
    }
}

#[cfg(test)]
mod tests;
