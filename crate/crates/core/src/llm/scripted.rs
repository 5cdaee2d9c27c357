//! Deterministic scripted model backend.
//!
//! A fixture is an ordered list of rules. For each request the first rule
//! whose `match` holds is chosen, and the response at index
//! `number of assistant messages already in the request` is returned (the
//! last response repeats once the list is exhausted). Selection depends only
//! on the request, so identical request sequences always produce identical
//! responses, regardless of concurrency or process restarts.
//!
//! ```json
//! {
//!   "latency_ms": 100,
//!   "rules": [
//!     {"match": {"tags": {"attempt": "1"}, "contains": "scene"},
//!      "responses": [{"kind": "fault", "fault": "transport"}]},
//!     {"match": {"has_schema": true},
//!      "responses": [{"kind": "summarize", "words": 40, "field": "summary"}]}
//!   ]
//! }
//! ```
//!
//! Response kinds: `text`, `tool_calls`, `object`, `summarize` (the first N
//! words of the last user message, cycled if short, optionally after a
//! marker), `fault` (`transport` | `unavailable` | `refused`) and `hang`
//! (never returns). Any response may carry `delay_ms`. Token usage is the
//! whitespace word count of the transcript and of the reply.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{count_tokens, BackendReply, ChatRequest, LlmError, ModelBackend, ModelGrade, Reply, Role, ToolCall, Usage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub latency_ms: u64,
    pub rules: Vec<Rule>,
}

impl Fixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Fixture, String> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.as_ref().display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, rename = "match")]
    pub when: MatchRule,
    pub responses: Vec<ResponseStep>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRule {
    /// Substring of the whole transcript.
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub not_contains: Option<String>,
    /// Substring of the last message.
    #[serde(default)]
    pub last_contains: Option<String>,
    #[serde(default)]
    pub grade: Option<ModelGrade>,
    #[serde(default)]
    pub has_tools: Option<bool>,
    #[serde(default)]
    pub has_schema: Option<bool>,
    /// Exact tag values.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    /// Numeric bound on the `attempt` tag.
    #[serde(default)]
    pub attempt_lte: Option<u32>,
}

impl MatchRule {
    fn matches(&self, req: &ChatRequest, transcript: &str) -> bool {
        let last = req.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        let attempt: u32 = req.tags.get("attempt").and_then(|a| a.parse().ok()).unwrap_or(1);
        self.contains.as_ref().is_none_or(|s| transcript.contains(s.as_str()))
            && self.not_contains.as_ref().is_none_or(|s| !transcript.contains(s.as_str()))
            && self.last_contains.as_ref().is_none_or(|s| last.contains(s.as_str()))
            && self.grade.is_none_or(|g| g == req.model_hint)
            && self.has_tools.is_none_or(|t| t == !req.tools.is_empty())
            && self.has_schema.is_none_or(|s| s == req.output_schema.is_some())
            && self.tags.iter().all(|(k, v)| req.tags.get(k) == Some(v))
            && self.attempt_lte.is_none_or(|n| attempt <= n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCall {
    pub name: String,
    #[serde(default)]
    pub arguments: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Transport,
    Unavailable,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseStep {
    Text {
        text: String,
        #[serde(default)]
        delay_ms: u64,
    },
    ToolCalls {
        calls: Vec<ScriptedCall>,
        #[serde(default)]
        delay_ms: u64,
    },
    Object {
        value: serde_json::Value,
        #[serde(default)]
        delay_ms: u64,
    },
    Summarize {
        words: usize,
        /// Emit `{field: summary}` instead of plain text.
        #[serde(default)]
        field: Option<String>,
        /// Only words after the first occurrence of this marker are used.
        #[serde(default)]
        after: Option<String>,
        #[serde(default)]
        prefix: Option<String>,
        #[serde(default)]
        delay_ms: u64,
    },
    Fault {
        fault: FaultKind,
        #[serde(default)]
        delay_ms: u64,
    },
    Hang,
}

impl ResponseStep {
    fn delay(&self) -> u64 {
        match self {
            ResponseStep::Text { delay_ms, .. }
            | ResponseStep::ToolCalls { delay_ms, .. }
            | ResponseStep::Object { delay_ms, .. }
            | ResponseStep::Summarize { delay_ms, .. }
            | ResponseStep::Fault { delay_ms, .. } => *delay_ms,
            ResponseStep::Hang => 0,
        }
    }
}

fn summarize(req: &ChatRequest, words: usize, after: Option<&str>, prefix: Option<&str>) -> String {
    let source = req.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or_default();
    let source = match after {
        Some(marker) => source.split_once(marker).map(|(_, rest)| rest).unwrap_or(source),
        None => source,
    };
    let pool: Vec<&str> = source.split_whitespace().collect();
    let mut out: Vec<&str> = prefix.map(|p| p.split_whitespace().collect()).unwrap_or_default();
    if pool.is_empty() {
        return "(empty)".into();
    }
    out.extend(pool.iter().cycle().take(words));
    out.join(" ")
}

pub struct ScriptedBackend {
    fixture: Fixture,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(fixture: Fixture) -> Self {
        ScriptedBackend { fixture, calls: AtomicU64::new(0) }
    }

    pub fn from_rules(rules: Vec<Rule>) -> Self {
        Self::new(Fixture { latency_ms: 0, rules })
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.fixture.latency_ms = ms;
        self
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn select(&self, req: &ChatRequest) -> Result<(usize, &ResponseStep), LlmError> {
        let transcript = req.transcript_text();
        let rule = self
            .fixture
            .rules
            .iter()
            .find(|r| r.when.matches(req, &transcript))
            .ok_or_else(|| LlmError::Refused("no scripted rule matches the request".into()))?;
        let idx = req.assistant_turns();
        let step = rule
            .responses
            .get(idx)
            .or_else(|| rule.responses.last())
            .ok_or_else(|| LlmError::Refused("scripted rule has no responses".into()))?;
        Ok((idx, step))
    }
}

#[async_trait::async_trait]
impl ModelBackend for ScriptedBackend {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendReply, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (idx, step) = self.select(req)?;
        let delay = self.fixture.latency_ms + step.delay();
        if delay > 0 {
            tokio::time::sleep(Duration::from_millis(delay)).await;
        }
        let reply = match step {
            ResponseStep::Text { text, .. } => Reply::Text { text: text.clone() },
            ResponseStep::Object { value, .. } => Reply::Object { value: value.clone() },
            ResponseStep::ToolCalls { calls, .. } => Reply::ToolCalls {
                calls: calls
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ToolCall { id: format!("call-{idx}-{i}"), name: c.name.clone(), arguments: c.arguments.clone() })
                    .collect(),
            },
            ResponseStep::Summarize { words, field, after, prefix, .. } => {
                let text = summarize(req, *words, after.as_deref(), prefix.as_deref());
                match field {
                    Some(f) => Reply::Object { value: serde_json::json!({ f.as_str(): text }) },
                    None => Reply::Text { text },
                }
            }
            ResponseStep::Fault { fault, .. } => {
                return Err(match fault {
                    FaultKind::Transport => LlmError::Transport("connection reset by peer".into()),
                    FaultKind::Unavailable => LlmError::Unavailable("backend overloaded".into()),
                    FaultKind::Refused => LlmError::Refused("scripted refusal".into()),
                })
            }
            ResponseStep::Hang => std::future::pending().await,
        };
        let usage = Usage { input_tokens: count_tokens(&req.transcript_text()), output_tokens: count_tokens(&reply.render()) };
        Ok(BackendReply { reply, usage })
    }
}
