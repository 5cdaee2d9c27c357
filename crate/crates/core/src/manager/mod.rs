//! The per-task manager: rounds of exploration, report, delegation gate and
//! batch execution, driven by a model through the tool suite.

mod context;
mod plan;
mod tools;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as J};
use thiserror::Error;

use crate::blob::BlobStore;
use crate::fabric::{Dispatch, Executor, FabricError, StagingArea};
use crate::llm::{ChatRequest, ChatResponse, Gateway, LlmError, Message, ModelGrade, Reply};
use crate::registry::{AgentPreset, CapabilitySource, PresetStore};
use crate::state::{Entity, ManagerCheckpoint, StateError, StateStore, TaskStatus};
use crate::table::{Field, FieldType, Schema, TableError, TableStore};

pub use context::{elide, message_bytes, Phase, Prompts, EXPLORE_FIRST};
pub use plan::{ContractField, OutputContract, Plan, PlanStep, SpecStatus, StepStatus, TableSpec};
pub use tools::{tool_names, tool_specs, truncate_to, ManagerState, DEFAULT_EXCERPT_BYTES, DEFAULT_RESULT_BUDGET};

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("plan step `{step}` cannot move from {from:?} back to {to:?}")]
    PlanRegression { step: String, from: StepStatus, to: StepStatus },
    #[error("context needs {needed} bytes after elision, budget is {budget}; lower the digest budget")]
    ContextBudget { needed: usize, budget: usize },
    #[error("manager model: {0}")]
    Model(#[from] LlmError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("prompt templates: {0}")]
    Prompt(String),
    #[error("task `{0}` is not running")]
    NotRunning(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    pub round_budget: u32,
    /// Tool calls per round.
    pub tool_budget: u32,
    /// Bytes of rendered context.
    pub context_budget: usize,
    /// Bytes per table digest.
    pub digest_budget: usize,
    pub default_result_budget: usize,
    pub result_budgets: BTreeMap<String, usize>,
    pub excerpt_bytes: usize,
    pub gate_rejection_limit: u32,
    pub model_attempts: u32,
    /// Stop after checkpointing this round, as if the process died.
    pub halt_after_round: Option<u32>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            round_budget: 12,
            tool_budget: 40,
            context_budget: 256 * 1024,
            digest_budget: 1024,
            default_result_budget: DEFAULT_RESULT_BUDGET,
            result_budgets: BTreeMap::from([("preview_rows".to_string(), 8192), ("filter_rows".to_string(), 8192)]),
            excerpt_bytes: DEFAULT_EXCERPT_BYTES,
            gate_rejection_limit: 3,
            model_attempts: 3,
            halt_after_round: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    DispatchBatch,
    Finalize,
}

/// Reads the last `TRANSITION:` line of a reply.
pub fn parse_transition(text: &str) -> Option<Transition> {
    text.lines().rev().find_map(|l| {
        let l = l.trim().trim_matches('`').trim();
        let (head, rest) = l.split_once(':')?;
        if !head.trim().eq_ignore_ascii_case("transition") {
            return None;
        }
        match rest.trim().trim_matches('`').to_ascii_lowercase().as_str() {
            "dispatch" | "dispatch_batch" | "dispatch-batch" => Some(Transition::DispatchBatch),
            "finalize" => Some(Transition::Finalize),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum GateDecision {
    Accept,
    Reject { reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    #[serde(default)]
    pub round: u32,
    #[serde(default)]
    pub accomplishments: Vec<String>,
    #[serde(default)]
    pub next_steps: Vec<String>,
    #[serde(default)]
    pub blockers: Vec<String>,
}

fn report_schema() -> Schema {
    Schema::new(vec![
        Field::new("accomplishments", FieldType::TextList),
        Field::new("next_steps", FieldType::TextList),
        Field::new("blockers", FieldType::TextList),
    ])
    .expect("static schema")
}

fn gate_schema() -> Schema {
    Schema::new(vec![Field::new("approve", FieldType::Boolean), Field::new("reason", FieldType::Text)]).expect("static schema")
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Finalized { report: J, rounds: u32 },
    Failed { report: J, rounds: u32 },
    /// Stopped by `halt_after_round`; resumable from the last checkpoint.
    Halted { round: u32 },
}

/// Shared services a manager runs against.
#[derive(Clone)]
pub struct ManagerDeps {
    pub gateway: Arc<Gateway>,
    pub executor: Arc<Executor>,
    pub state: Arc<StateStore>,
    pub blobs: Arc<BlobStore>,
    pub registry: Arc<dyn CapabilitySource>,
}

#[derive(Serialize, Deserialize, Default)]
struct CheckpointExtra {
    batches: u32,
    last_batch: Option<String>,
    presets: Vec<AgentPreset>,
    reports: Vec<RoundReport>,
}

pub struct Manager {
    cfg: ManagerConfig,
    prompts: Prompts,
    deps: ManagerDeps,
    query: String,
    st: ManagerState,
    round: u32,
    batches: u32,
    last_batch: Option<String>,
    reports: Vec<RoundReport>,
}

impl Manager {
    /// A manager for a registered, running task starting at round 1.
    pub fn new(cfg: ManagerConfig, deps: ManagerDeps, task_id: &str, tables: Arc<TableStore>, presets: PresetStore) -> Result<Manager, ManagerError> {
        let task = deps.state.task(task_id)?;
        if task.status != TaskStatus::Running {
            return Err(ManagerError::NotRunning(task_id.to_string()));
        }
        let st = ManagerState {
            task_id: task_id.to_string(),
            tables,
            presets,
            registry: deps.registry.clone(),
            state: deps.state.clone(),
            staging: StagingArea::new(),
            plan: Plan::default(),
            contract: OutputContract::default(),
            excerpt_bytes: cfg.excerpt_bytes,
            digest_budget: cfg.digest_budget,
        };
        Ok(Manager { cfg, prompts: Prompts::builtin(), deps, query: task.query, st, round: 0, batches: 0, last_batch: None, reports: vec![] })
    }

    /// Rebuilds a manager from the task's latest checkpoint. The next
    /// `run` continues with the following round.
    pub fn resume(cfg: ManagerConfig, deps: ManagerDeps, task_id: &str) -> Result<Manager, ManagerError> {
        let cp = deps.state.recover_latest_checkpoint(task_id)?;
        let bad = |e: serde_json::Error| ManagerError::Checkpoint(e.to_string());
        let tables = Arc::new(TableStore::restore(deps.blobs.clone(), &cp.catalog)?);
        let extra: CheckpointExtra = serde_json::from_value(cp.extra.clone()).map_err(bad)?;
        let mut m = Manager::new(cfg, deps, task_id, tables, PresetStore::from_presets(extra.presets))?;
        m.st.plan = serde_json::from_value(cp.plan).map_err(bad)?;
        m.st.contract = serde_json::from_value(cp.contract).map_err(bad)?;
        m.st.staging = serde_json::from_value(cp.staged).map_err(bad)?;
        m.round = cp.round;
        m.batches = extra.batches;
        m.last_batch = extra.last_batch;
        m.reports = extra.reports;
        Ok(m)
    }

    pub fn with_prompts(mut self, prompts: Prompts) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn state(&self) -> &ManagerState {
        &self.st
    }

    pub fn state_mut(&mut self) -> &mut ManagerState {
        &mut self.st
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    /// Runs one tool and returns what the transcript sees.
    pub fn dispatch_tool(&mut self, name: &str, args: &J) -> String {
        let budget = self.cfg.result_budgets.get(name).copied().unwrap_or(self.cfg.default_result_budget);
        match self.st.call(name, args) {
            Ok(out) => truncate_to(out, budget),
            Err(e) => truncate_to(format!("error: {e}"), budget),
        }
    }

    /// The state block shown at the top of every exploration request.
    pub fn state_summary(&self) -> Result<String, ManagerError> {
        let tables = &self.st.tables;
        let mut out = format!("# Task\n{}\n\n# Round\n{} of {}. Up to {} tool calls this round.\n", self.query, self.round, self.cfg.round_budget, self.cfg.tool_budget);
        if self.round == 1 {
            out.push_str(EXPLORE_FIRST);
            out.push('\n');
        }
        out.push_str(&format!("\n# Plan\n{}\n\n# Output contract\n{}\n\n# Tables\n", self.st.plan.render(), self.st.contract.render(tables)));
        let listing = tables.list(false);
        if listing.is_empty() {
            out.push_str("(none)\n");
        }
        for t in listing.iter() {
            out.push_str(&String::from_utf8_lossy(&tables.digest(&t.id, self.cfg.digest_budget)?.to_bytes()));
            out.push('\n');
        }
        out.push_str("\n# Staged subtasks\n");
        if self.st.staging.is_empty() {
            out.push_str("(none)\n");
        }
        for e in self.st.staging.entries() {
            let over = match &e.template.data_source {
                Some(id) => format!("over {id} ({} rows)", tables.get(id).map(|t| t.row_count).unwrap_or(0)),
                None => "single".to_string(),
            };
            out.push_str(&format!("- {}: preset `{}`, {over}\n", e.id, e.template.preset));
        }
        let presets: Vec<String> = self.st.presets.list().into_iter().map(|p| p.name).collect();
        out.push_str(&format!("\n# Agent presets\n{}\n", if presets.is_empty() { "(none)".into() } else { presets.join(", ") }));
        out.push_str(&format!("\n# Last batch\n{}\n", self.last_batch.as_deref().unwrap_or("(none)")));
        Ok(out)
    }

    fn request(&self, phase: Phase, messages: Vec<Message>) -> ChatRequest {
        ChatRequest::new(ModelGrade::Planner, messages)
            .with_scope(self.st.task_id.clone())
            .with_scope(format!("{}/manager", self.st.task_id))
            .with_tag("task", self.st.task_id.clone())
            .with_tag("phase", phase.tag())
            .with_tag("round", self.round.to_string())
    }

    /// Builds the exploration request: system prompt, state block, then the
    /// round's transcript with the oldest tool results elided to fit.
    pub fn render_context(&self, transcript: &[Message]) -> Result<ChatRequest, ManagerError> {
        let mut messages = vec![Message::system(self.prompts.system.clone()), Message::user(self.state_summary()?)];
        messages.extend_from_slice(transcript);
        elide(&mut messages, self.cfg.context_budget)?;
        Ok(self.request(Phase::Exploration, messages).with_tools(tool_specs()))
    }

    async fn complete(&self, req: ChatRequest) -> Result<ChatResponse, ManagerError> {
        let mut attempt = 1;
        loop {
            match self.deps.gateway.complete(req.clone()).await {
                Err(e) if e.is_transient() && attempt < self.cfg.model_attempts => attempt += 1,
                r => return Ok(r?),
            }
        }
    }

    fn event(&self, kind: &str, payload: J) -> Result<(), ManagerError> {
        self.deps.state.append_event(&self.st.task_id, kind, payload)?;
        Ok(())
    }

    async fn explore(&mut self, transcript: &mut Vec<Message>, calls_made: &mut u32) -> Result<String, ManagerError> {
        let mut over_budget_turns = 0;
        loop {
            let req = self.render_context(transcript)?;
            let resp = self.complete(req).await?;
            match resp.reply {
                Reply::ToolCalls { calls } => {
                    transcript.push(Message::assistant_calls(calls.clone()));
                    if *calls_made >= self.cfg.tool_budget {
                        over_budget_turns += 1;
                    }
                    for c in &calls {
                        let out = if *calls_made >= self.cfg.tool_budget {
                            "error: tool budget for this round is spent; end your turn with a TRANSITION line".to_string()
                        } else {
                            *calls_made += 1;
                            self.dispatch_tool(&c.name, &c.arguments)
                        };
                        self.event("tool_call", json!({"round": self.round, "tool": c.name, "ok": !out.starts_with("error:")}))?;
                        transcript.push(Message::tool_result(c.id.clone(), out));
                    }
                    if over_budget_turns > 1 {
                        return Ok(String::new());
                    }
                }
                other => {
                    let text = match other {
                        Reply::Text { text } => text,
                        o => o.render(),
                    };
                    transcript.push(Message::assistant(text.clone()));
                    return Ok(text);
                }
            }
        }
    }

    fn digest_of_round(&self, transcript: &[Message]) -> String {
        let mut out = String::new();
        for m in transcript {
            for c in &m.tool_calls {
                out.push_str(&format!("called {} {}\n", c.name, truncate_to(c.arguments.to_string(), 200)));
            }
            if m.role == crate::llm::Role::Assistant && !m.content.is_empty() {
                out.push_str(&format!("said: {}\n", truncate_to(m.content.clone(), 2000)));
            }
        }
        out
    }

    async fn round_report(&self, transcript: &[Message]) -> RoundReport {
        let user = format!("{}\n# This round\n{}", self.state_summary().unwrap_or_default(), self.digest_of_round(transcript));
        let req = self.request(Phase::Report, vec![Message::system(self.prompts.report.clone()), Message::user(user)]).with_schema(report_schema());
        match self.complete(req).await {
            Ok(ChatResponse { reply: Reply::Object { value }, .. }) => {
                let mut r: RoundReport = serde_json::from_value(value).unwrap_or_default();
                r.round = self.round;
                r
            }
            Ok(_) => RoundReport { round: self.round, blockers: vec!["report generation returned no object".into()], ..Default::default() },
            Err(e) => RoundReport { round: self.round, blockers: vec![format!("report generation failed: {e}")], ..Default::default() },
        }
    }

    /// Judges a proposed transition. The mechanical checks run first and
    /// cannot be overridden by the model.
    pub async fn delegation_gate(&self, proposal: Option<Transition>, last_text: &str) -> GateDecision {
        let reject = |reason: String| GateDecision::Reject { reason };
        let Some(t) = proposal else {
            return reject("no transition proposed; end your turn with `TRANSITION: dispatch` or `TRANSITION: finalize`".into());
        };
        match t {
            Transition::DispatchBatch if self.st.staging.is_empty() => return reject("nothing staged".into()),
            Transition::Finalize => {
                let unmet: Vec<String> = self.st.contract.check(&self.st.tables).into_iter().filter_map(|s| s.reason).collect();
                if !unmet.is_empty() {
                    return reject(format!("output contract unsatisfied: {}", unmet.join("; ")));
                }
            }
            _ => {}
        }
        let user = format!(
            "{}\n# Proposed transition\n{}\n\n# Manager's closing message\n{}",
            self.state_summary().unwrap_or_default(),
            match t {
                Transition::DispatchBatch => "dispatch the staged subtasks as one batch",
                Transition::Finalize => "finalize the task",
            },
            last_text
        );
        let req = self.request(Phase::DelegationGate, vec![Message::system(self.prompts.gate.clone()), Message::user(user)]).with_schema(gate_schema());
        match self.complete(req).await {
            Ok(ChatResponse { reply: Reply::Object { value }, .. }) => {
                if value.get("approve").and_then(J::as_bool) == Some(true) {
                    GateDecision::Accept
                } else {
                    reject(value.get("reason").and_then(J::as_str).unwrap_or("rejected").to_string())
                }
            }
            Ok(_) => reject("review returned no decision".into()),
            Err(e) => reject(format!("review failed: {e}")),
        }
    }

    fn checkpoint(&self) -> Result<(), ManagerError> {
        let extra = CheckpointExtra {
            batches: self.batches,
            last_batch: self.last_batch.clone(),
            presets: self.st.presets.list(),
            reports: self.reports.clone(),
        };
        let cp = ManagerCheckpoint {
            task_id: self.st.task_id.clone(),
            round: self.round,
            plan: to(&self.st.plan),
            contract: to(&self.st.contract),
            catalog: self.st.tables.snapshot()?,
            staged: to(&self.st.staging),
            extra: to(&extra),
        };
        let ev = self.deps.state.next_event(&self.st.task_id, 0, "checkpoint", json!({"round": self.round}))?;
        self.deps.state.record_all(vec![Entity::Checkpoint(cp), Entity::Event(ev)])?;
        Ok(())
    }

    fn final_report(&self, closing: &str) -> J {
        let summary: Vec<&str> = closing.lines().filter(|l| parse_transition(l).is_none()).collect();
        let tables: Vec<J> = self
            .st
            .contract
            .tables
            .iter()
            .filter_map(|s| self.st.tables.find_live(&s.name))
            .map(|t| json!({"name": t.name, "id": t.id, "rows": t.row_count}))
            .collect();
        json!({
            "task_id": self.st.task_id,
            "query": self.query,
            "rounds": self.round,
            "summary": summary.join("\n").trim(),
            "contract": self.st.contract.check(&self.st.tables),
            "tables": tables,
            "reports": self.reports,
        })
    }

    /// Runs rounds until the task finalizes, fails, or halts.
    pub async fn run(&mut self) -> Result<TaskOutcome, ManagerError> {
        match self.run_rounds().await {
            Err(ManagerError::Model(e)) => {
                let report = json!({"error": e.to_string(), "reports": self.reports});
                self.deps.state.fail_task(&self.st.task_id, report)?;
                Err(ManagerError::Model(e))
            }
            other => other,
        }
    }

    async fn run_rounds(&mut self) -> Result<TaskOutcome, ManagerError> {
        while self.round < self.cfg.round_budget {
            self.round += 1;
            self.event("round_started", json!({"round": self.round}))?;
            let mut transcript = Vec::new();
            let mut calls = 0;
            let mut rejections = 0;
            let mut report;
            let (accepted, closing) = loop {
                let text = self.explore(&mut transcript, &mut calls).await?;
                report = self.round_report(&transcript).await;
                let proposal = parse_transition(&text);
                match self.delegation_gate(proposal, &text).await {
                    GateDecision::Accept => {
                        self.event("gate", json!({"round": self.round, "transition": proposal, "decision": "accept"}))?;
                        break (proposal, text);
                    }
                    GateDecision::Reject { reason } => {
                        self.event("gate", json!({"round": self.round, "transition": proposal, "decision": "reject", "reason": reason}))?;
                        rejections += 1;
                        if rejections >= self.cfg.gate_rejection_limit {
                            break (None, text);
                        }
                        transcript.push(Message::user(format!("The proposed transition was rejected: {reason}. Continue exploring.")));
                    }
                }
            };
            self.event("round_report", serde_json::to_value(&report).unwrap_or(J::Null))?;
            self.reports.push(report);

            match accepted {
                Some(Transition::Finalize) => {
                    let report = self.final_report(&closing);
                    self.checkpoint()?;
                    self.deps.state.finalize_task(&self.st.task_id, report.clone())?;
                    return Ok(TaskOutcome::Finalized { report, rounds: self.round });
                }
                Some(Transition::DispatchBatch) => {
                    self.batches += 1;
                    let batch_id = format!("b{}", self.batches);
                    let entries = self.st.staging.take();
                    let d = Dispatch {
                        task_id: &self.st.task_id,
                        batch_id: &batch_id,
                        tables: &self.st.tables,
                        presets: &self.st.presets,
                        state: Some(&self.deps.state),
                    };
                    let result = self.deps.executor.dispatch(d, &entries).await?;
                    self.last_batch = Some(result.summary());
                }
                None => {}
            }
            self.checkpoint()?;
            if self.cfg.halt_after_round == Some(self.round) {
                return Ok(TaskOutcome::Halted { round: self.round });
            }
        }
        let report = json!({
            "reason": format!("round budget of {} exhausted", self.cfg.round_budget),
            "contract": self.st.contract.check(&self.st.tables),
            "last_report": self.reports.last(),
        });
        self.deps.state.fail_task(&self.st.task_id, report.clone())?;
        Ok(TaskOutcome::Failed { report, rounds: self.round })
    }
}

fn to<T: Serialize>(v: &T) -> J {
    serde_json::to_value(v).expect("manager state serializes")
}
