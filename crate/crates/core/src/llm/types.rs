use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::table::Schema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelGrade {
    Planner,
    Worker,
    Nano,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into(), tool_calls: vec![], tool_call_id: None }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into(), tool_calls: vec![], tool_call_id: None }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into(), tool_calls: vec![], tool_call_id: None }
    }

    pub fn assistant_calls(calls: Vec<ToolCall>) -> Self {
        Message { role: Role::Assistant, content: String::new(), tool_calls: calls, tool_call_id: None }
    }

    pub fn tool_result(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Message { role: Role::Tool, content: content.into(), tool_calls: vec![], tool_call_id: Some(call_id.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    /// Argument names to a short type description.
    #[serde(default)]
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
    #[serde(default)]
    pub output_schema: Option<Schema>,
    pub model_hint: ModelGrade,
    pub token_budget: u64,
    /// Usage scopes charged for this request, e.g. a task id and a subtask id.
    #[serde(default)]
    pub scopes: Vec<String>,
    /// Free-form labels visible to backends (`subtask`, `attempt`, `phase`).
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(model_hint: ModelGrade, messages: Vec<Message>) -> Self {
        ChatRequest {
            messages,
            tools: vec![],
            output_schema: None,
            model_hint,
            token_budget: DEFAULT_TOKEN_BUDGET,
            scopes: vec![],
            tags: BTreeMap::new(),
        }
    }

    pub fn with_schema(mut self, schema: Schema) -> Self {
        self.output_schema = Some(schema);
        self
    }

    pub fn with_tools(mut self, tools: Vec<ToolSpec>) -> Self {
        self.tools = tools;
        self
    }

    pub fn with_scope(mut self, scope: impl Into<String>) -> Self {
        self.scopes.push(scope.into());
        self
    }

    pub fn with_tag(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.tags.insert(k.into(), v.into());
        self
    }

    pub fn with_budget(mut self, tokens: u64) -> Self {
        self.token_budget = tokens;
        self
    }

    /// All message contents joined, for matching and token estimates.
    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&m.content);
            out.push('\n');
            for c in &m.tool_calls {
                out.push_str(&c.name);
                out.push(' ');
                out.push_str(&c.arguments.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::Assistant).count()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("request has no messages".into());
        }
        if self.token_budget == 0 {
            return Err("token budget must be positive".into());
        }
        let mut calls = std::collections::BTreeSet::new();
        for (i, m) in self.messages.iter().enumerate() {
            match m.role {
                Role::Assistant => calls.extend(m.tool_calls.iter().map(|c| c.id.as_str())),
                Role::Tool => match &m.tool_call_id {
                    Some(id) if calls.contains(id.as_str()) => {}
                    Some(id) => return Err(format!("message {i} answers unknown tool call `{id}`")),
                    None => return Err(format!("tool message {i} lacks a call id")),
                },
                _ => {}
            }
        }
        Ok(())
    }
}

pub const DEFAULT_TOKEN_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reply {
    Text { text: String },
    ToolCalls { calls: Vec<ToolCall> },
    Object { value: serde_json::Value },
}

impl Reply {
    pub fn text(&self) -> Option<&str> {
        match self {
            Reply::Text { text } => Some(text),
            _ => None,
        }
    }

    /// The reply rendered as it would appear in a transcript.
    pub fn render(&self) -> String {
        match self {
            Reply::Text { text } => text.clone(),
            Reply::ToolCalls { calls } => serde_json::to_string(calls).unwrap_or_default(),
            Reply::Object { value } => value.to_string(),
        }
    }
}

/// What a backend returns for one call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub reply: Reply,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub reply: Reply,
    /// Usage summed over the call and any re-asks.
    pub usage: Usage,
    pub reasks: u32,
}

/// Deterministic token estimate: whitespace-separated words.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
