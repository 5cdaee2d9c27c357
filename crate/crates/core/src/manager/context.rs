use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::llm::{Message, Role};

use super::ManagerError;

/// Prompt templates. The built-in set is compiled from `prompts/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompts {
    pub system: String,
    pub report: String,
    pub gate: String,
}

impl Prompts {
    pub fn builtin() -> Self {
        Prompts {
            system: include_str!("../../prompts/manager_system.md").to_string(),
            report: include_str!("../../prompts/round_report.md").to_string(),
            gate: include_str!("../../prompts/delegation_gate.md").to_string(),
        }
    }

    /// Reads `manager_system.md`, `round_report.md` and `delegation_gate.md`
    /// from `dir`.
    pub fn load(dir: &Path) -> Result<Self, ManagerError> {
        let read = |f: &str| std::fs::read_to_string(dir.join(f)).map_err(|e| ManagerError::Prompt(format!("{}: {e}", dir.join(f).display())));
        Ok(Prompts { system: read("manager_system.md")?, report: read("round_report.md")?, gate: read("delegation_gate.md")? })
    }
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts::builtin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exploration,
    Report,
    DelegationGate,
    Executing,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Exploration => "explore",
            Phase::Report => "report",
            Phase::DelegationGate => "gate",
            Phase::Executing => "execute",
        }
    }
}

pub const EXPLORE_FIRST: &str = "This is the first round. Explore your local state before anything else: list the tables and inspect \
their metadata. Then write a plan with write_plan and an output contract with write_output_contract.";

pub fn message_bytes(messages: &[Message]) -> usize {
    messages.iter().map(|m| m.content.len() + m.tool_calls.iter().map(|c| c.name.len() + c.arguments.to_string().len()).sum::<usize>()).sum()
}

/// Replaces the oldest tool results with one-line markers until the
/// messages fit `budget` bytes.
pub fn elide(messages: &mut [Message], budget: usize) -> Result<usize, ManagerError> {
    let mut size = message_bytes(messages);
    let mut elided = 0;
    for m in messages.iter_mut() {
        if size <= budget {
            break;
        }
        if m.role != Role::Tool || m.content.starts_with("[elided") {
            continue;
        }
        let marker = format!("[elided tool result, {} bytes]", m.content.len());
        size = size - m.content.len() + marker.len();
        m.content = marker;
        elided += 1;
    }
    if size > budget {
        return Err(ManagerError::ContextBudget { needed: size, budget });
    }
    Ok(elided)
}
