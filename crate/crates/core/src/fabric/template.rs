//! Subtask templates, the staging area and template expansion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blob::{BlobRef, BlobStore};
use crate::registry::{AgentPreset, PresetStore};
use crate::table::{Record, RowId, Schema, TableId, TableStore, Value, LINEAGE_COLUMNS};

use super::FabricError;

/// Scalars whose rendered text exceeds this many bytes are passed by
/// reference instead of inline.
pub const INLINE_LIMIT: usize = 8 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Binding {
    Column { column: String },
    Literal { literal: serde_json::Value },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    LlmOnly,
    FullAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskTemplate {
    pub preset: String,
    pub instruction: String,
    #[serde(default)]
    pub bindings: BTreeMap<String, Binding>,
    #[serde(default)]
    pub data_source: Option<TableId>,
    /// Defaults to llm-only when the preset has no capabilities.
    #[serde(default)]
    pub mode: Option<ExecutionMode>,
    pub output_schema: Schema,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    /// Display name for this entry's results table.
    #[serde(default)]
    pub results_name: Option<String>,
}

/// Placeholder names in order of first appearance. A placeholder is
/// `{{name}}`; whitespace inside the braces is ignored.
pub fn placeholders(instruction: &str) -> Result<Vec<String>, FabricError> {
    let mut out = Vec::new();
    let mut rest = instruction;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| FabricError::InvalidTemplate("unterminated `{{`".into()))?;
        let name = after[..end].trim();
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') {
            return Err(FabricError::InvalidTemplate(format!("bad placeholder `{{{{{}}}}}`", &after[..end])));
        }
        if !out.iter().any(|n| n == name) {
            out.push(name.to_string());
        }
        rest = &after[end + 2..];
    }
    Ok(out)
}

fn substitute(instruction: &str, mut value_of: impl FnMut(&str) -> String) -> String {
    let mut out = String::with_capacity(instruction.len());
    let mut rest = instruction;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").expect("validated template");
        out.push_str(&value_of(after[..end].trim()));
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// Marker left in a resolved instruction where a by-reference input goes.
pub fn input_marker(name: &str) -> String {
    format!("[input:{name}]")
}

impl SubtaskTemplate {
    /// Checks the template's own invariants against its data source schema.
    pub fn validate(&self, source: Option<&Schema>, presets: &PresetStore) -> Result<AgentPreset, FabricError> {
        let preset = presets.get(&self.preset).map_err(|_| FabricError::UnknownPreset(self.preset.clone()))?;
        for name in placeholders(&self.instruction)? {
            if !self.bindings.contains_key(&name) {
                return Err(FabricError::UnresolvedPlaceholder(name));
            }
        }
        for (name, b) in &self.bindings {
            if let Binding::Column { column } = b {
                let schema = source.ok_or_else(|| FabricError::InvalidTemplate(format!("binding `{name}` names column `{column}` but there is no data source")))?;
                if schema.field(column).is_none() {
                    return Err(FabricError::UnknownColumn(column.clone()));
                }
            }
        }
        for c in LINEAGE_COLUMNS {
            if self.output_schema.field(c).is_some() {
                return Err(FabricError::InvalidTemplate(format!("output schema may not declare `{c}`")));
            }
        }
        if self.output_schema.is_empty() {
            return Err(FabricError::InvalidTemplate("output schema has no fields".into()));
        }
        if self.timeout_ms == Some(0) {
            return Err(FabricError::InvalidTemplate("timeout must be positive".into()));
        }
        Ok(preset)
    }

    pub fn effective_mode(&self, preset: &AgentPreset) -> ExecutionMode {
        self.mode.unwrap_or(if preset.capabilities.is_empty() { ExecutionMode::LlmOnly } else { ExecutionMode::FullAgent })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedEntry {
    pub id: String,
    pub template: SubtaskTemplate,
}

/// Templates waiting for the next dispatch. Single writer (the manager).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StagingArea {
    entries: Vec<StagedEntry>,
    next: u64,
}

impl StagingArea {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[StagedEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn push(&mut self, template: SubtaskTemplate) -> StagedEntry {
        self.next += 1;
        let entry = StagedEntry { id: format!("e{}", self.next), template };
        self.entries.push(entry.clone());
        entry
    }

    pub fn stage_single(&mut self, mut template: SubtaskTemplate, presets: &PresetStore) -> Result<StagedEntry, FabricError> {
        template.data_source = None;
        template.validate(None, presets)?;
        Ok(self.push(template))
    }

    pub fn stage_dataset(
        &mut self,
        mut template: SubtaskTemplate,
        table: &TableId,
        tables: &TableStore,
        presets: &PresetStore,
    ) -> Result<StagedEntry, FabricError> {
        let t = tables.get(table)?;
        if t.archived {
            return Err(FabricError::ArchivedSource(table.to_string()));
        }
        template.data_source = Some(t.id.clone());
        template.validate(Some(&t.schema), presets)?;
        Ok(self.push(template))
    }

    pub fn remove(&mut self, id: &str) -> Result<StagedEntry, FabricError> {
        let pos = self.entries.iter().position(|e| e.id == id).ok_or_else(|| FabricError::UnknownEntry(id.to_string()))?;
        Ok(self.entries.remove(pos))
    }

    pub fn clear(&mut self) -> usize {
        let n = self.entries.len();
        self.entries.clear();
        n
    }

    /// Empties the area, returning the entries.
    pub fn take(&mut self) -> Vec<StagedEntry> {
        std::mem::take(&mut self.entries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputValue {
    Inline { value: serde_json::Value },
    Blob { blob: BlobRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRow {
    pub table: TableId,
    pub row: RowId,
}

/// A self-contained unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub subtask_id: String,
    pub task_id: String,
    pub batch_id: String,
    pub entry: String,
    pub instruction: String,
    pub inputs: BTreeMap<String, InputValue>,
    pub preset: AgentPreset,
    pub mode: ExecutionMode,
    pub output_schema: Schema,
    pub timeout_ms: u64,
    #[serde(default)]
    pub source: Option<SourceRow>,
}

fn resolve_value(name: &str, v: &Value, blobs: &BlobStore) -> Result<(String, InputValue), FabricError> {
    match v {
        Value::BlobRef(r) => Ok((input_marker(name), InputValue::Blob { blob: r.clone() })),
        other => {
            let text = other.render();
            if text.len() > INLINE_LIMIT {
                let r = blobs.put_with_hint(text.as_bytes(), "text/plain")?;
                Ok((input_marker(name), InputValue::Blob { blob: r }))
            } else {
                Ok((text, InputValue::Inline { value: other.to_json() }))
            }
        }
    }
}

fn resolve_literal(name: &str, j: &serde_json::Value, blobs: &BlobStore) -> Result<(String, InputValue), FabricError> {
    let v = match j {
        serde_json::Value::String(s) => Value::Text(s.clone()),
        other => Value::Structured(other.clone()),
    };
    resolve_value(name, &v, blobs)
}

/// Expands staged entries into specs, in entry order then row order. Ids
/// are `{task}-{batch}-{index:05}` with a 1-based index across the batch.
pub fn expand(
    entries: &[StagedEntry],
    task_id: &str,
    batch_id: &str,
    tables: &TableStore,
    presets: &PresetStore,
    default_timeout_ms: u64,
) -> Result<Vec<SubtaskSpec>, FabricError> {
    let blobs = tables.blobs();
    let mut specs = Vec::new();
    for entry in entries {
        let t = &entry.template;
        let source = match &t.data_source {
            Some(id) => Some((id.clone(), tables.data(id)?)),
            None => None,
        };
        let preset = t.validate(source.as_ref().map(|(_, d)| &d.schema), presets)?;
        let mode = t.effective_mode(&preset);
        let rows: Vec<Option<&Record>> = match &source {
            Some((_, d)) => d.records.iter().map(Some).collect(),
            None => vec![None],
        };
        for row in rows {
            let mut inputs = BTreeMap::new();
            let mut rendered = BTreeMap::new();
            for (name, b) in &t.bindings {
                let (text, input) = match (b, row) {
                    (Binding::Column { column }, Some(r)) => resolve_value(name, r.get(column), blobs)?,
                    (Binding::Column { column }, None) => return Err(FabricError::UnknownColumn(column.clone())),
                    (Binding::Literal { literal }, _) => resolve_literal(name, literal, blobs)?,
                };
                rendered.insert(name.clone(), text);
                inputs.insert(name.clone(), input);
            }
            let instruction = substitute(&t.instruction, |n| rendered.get(n).cloned().unwrap_or_default());
            specs.push(SubtaskSpec {
                subtask_id: format!("{task_id}-{batch_id}-{:05}", specs.len() + 1),
                task_id: task_id.to_string(),
                batch_id: batch_id.to_string(),
                entry: entry.id.clone(),
                instruction,
                inputs,
                preset: preset.clone(),
                mode,
                output_schema: t.output_schema.clone(),
                timeout_ms: t.timeout_ms.unwrap_or(default_timeout_ms),
                source: source.as_ref().zip(row).map(|((id, _), r)| SourceRow { table: id.clone(), row: r.id.clone() }),
            });
        }
    }
    let ids: BTreeSet<&str> = specs.iter().map(|s| s.subtask_id.as_str()).collect();
    debug_assert_eq!(ids.len(), specs.len());
    Ok(specs)
}
