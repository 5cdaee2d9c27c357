//! Chat-completion gateway.
//!
//! Everything that talks to a model goes through [`Gateway::complete`]. The
//! gateway validates requests, enforces token budgets, paces requests,
//! validates structured output (re-asking up to [`MAX_REASKS`] times with the
//! validation report appended), and charges usage to scopes.
//!
//! Backends implement [`ModelBackend`]. The crate ships a deterministic
//! [`ScriptedBackend`]; adapters for hosted providers implement the same
//! trait outside this crate.

mod scripted;
mod types;
mod usage;

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::sync::Mutex as AsyncMutex;

use crate::table::{Value, ValidationReport};

pub use scripted::{Fixture, MatchRule, ResponseStep, Rule, ScriptedBackend};
pub use types::{
    count_tokens, BackendReply, ChatRequest, ChatResponse, Message, ModelGrade, Reply, Role, ToolCall, ToolSpec, Usage,
    DEFAULT_TOKEN_BUDGET,
};
pub use usage::{Rate, RateTable, UsageLedger, UsageReport};

pub const MAX_REASKS: u32 = 2;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("transport fault: {0}")]
    Transport(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend refused the request: {0}")]
    Refused(String),
    #[error("structured output invalid after {reasks} re-asks: {report}")]
    SchemaValidation { reasks: u32, report: String },
    #[error("token budget exhausted: request needs {needed}, budget {budget}")]
    BudgetExhausted { needed: u64, budget: u64 },
    #[error("malformed request: {0}")]
    InvalidRequest(String),
    #[error("unknown usage scope `{0}`")]
    UnknownScope(String),
}

impl LlmError {
    /// Transport faults and unavailability may clear on retry; everything
    /// else is a property of the request or the model's answer.
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::Unavailable(_))
    }
}

#[async_trait::async_trait]
pub trait ModelBackend: Send + Sync {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendReply, LlmError>;
}

pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    ledger: UsageLedger,
    min_interval: Option<Duration>,
    next_slot: AsyncMutex<Instant>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>, rates: RateTable) -> Self {
        Gateway { backend, ledger: UsageLedger::new(rates), min_interval: None, next_slot: AsyncMutex::new(Instant::now()) }
    }

    /// Limits request starts to `per_second`.
    pub fn with_rate_limit(mut self, per_second: f64) -> Self {
        if per_second > 0.0 {
            self.min_interval = Some(Duration::from_secs_f64(1.0 / per_second));
        }
        self
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn usage_report(&self, scope: &str) -> Result<UsageReport, LlmError> {
        self.ledger.report(scope)
    }

    async fn pace(&self) {
        let Some(iv) = self.min_interval else { return };
        let wait = {
            let mut next = self.next_slot.lock().await;
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + iv;
            start - now
        };
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }

    pub async fn complete(&self, req: ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate().map_err(LlmError::InvalidRequest)?;
        let needed = count_tokens(&req.transcript_text());
        if needed > req.token_budget {
            return Err(LlmError::BudgetExhausted { needed, budget: req.token_budget });
        }
        let mut req = req;
        let mut total = Usage::default();
        let mut reasks = 0;
        loop {
            self.pace().await;
            let out = self.backend.complete(&req).await?;
            self.ledger.record(&req.scopes, req.model_hint, out.usage);
            total.input_tokens += out.usage.input_tokens;
            total.output_tokens += out.usage.output_tokens;
            if total.input_tokens + total.output_tokens > req.token_budget {
                return Err(LlmError::BudgetExhausted { needed: total.input_tokens + total.output_tokens, budget: req.token_budget });
            }
            let Some(schema) = &req.output_schema else {
                return Ok(ChatResponse { reply: out.reply, usage: total, reasks });
            };
            match structured(&out.reply, schema) {
                Ok(value) => return Ok(ChatResponse { reply: Reply::Object { value }, usage: total, reasks }),
                Err(report) if reasks < MAX_REASKS => {
                    reasks += 1;
                    req.messages.push(Message::assistant(out.reply.render()));
                    req.messages.push(Message::user(format!(
                        "Your previous reply did not match the required output schema ({}). Problems: {report}. \
                         Reply with only a JSON object that matches the schema.",
                        schema.summary()
                    )));
                }
                Err(report) => return Err(LlmError::SchemaValidation { reasks, report: report.to_string() }),
            }
        }
    }
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Parses and validates a reply in structured mode. Returns the object with
/// values normalized through the schema.
fn structured(reply: &Reply, schema: &crate::table::Schema) -> Result<serde_json::Value, ValidationReport> {
    let parse_err = |reason: String| ValidationReport { issues: vec![crate::table::FieldIssue { field: String::new(), reason }] };
    let json = match reply {
        Reply::Object { value } => value.clone(),
        Reply::Text { text } => serde_json::from_str(strip_fences(text)).map_err(|e| parse_err(format!("not JSON: {e}")))?,
        Reply::ToolCalls { .. } => return Err(parse_err("tool calls are not allowed in structured mode".into())),
    };
    let values = schema.validate_json(&json)?;
    Ok(serde_json::Value::Object(values.into_iter().map(|(k, v)| (k, Value::to_json(&v))).collect()))
}
