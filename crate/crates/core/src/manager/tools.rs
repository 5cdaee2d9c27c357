//! The manager's tool suite. Every tool takes a JSON object and returns
//! text for the transcript; failures come back as `error: ...` text.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value as J};

use crate::fabric::{StagingArea, SubtaskTemplate};
use crate::llm::{ModelGrade, ToolSpec};
use crate::registry::{AgentPreset, CapabilitySource, PresetStore};
use crate::state::{RunStatus, StateStore};
use crate::table::analytics::{self, AggregateSpec};
use crate::table::{
    ComputedColumn, GroupAggregation, JoinKey, LineageOp, Operator, Predicate, Record, TableData, TableId, TableKind,
    TableStore, Value,
};

use super::plan::{OutputContract, Plan};

pub const DEFAULT_RESULT_BUDGET: usize = 4096;
pub const DEFAULT_EXCERPT_BYTES: usize = 2048;
const DEFAULT_PAGE_SIZE: usize = 10;

/// Everything the tools read and write. Owned by the manager.
pub struct ManagerState {
    pub task_id: String,
    pub tables: Arc<TableStore>,
    pub presets: PresetStore,
    pub registry: Arc<dyn CapabilitySource>,
    pub state: Arc<StateStore>,
    pub staging: StagingArea,
    pub plan: Plan,
    pub contract: OutputContract,
    pub excerpt_bytes: usize,
    pub digest_budget: usize,
}

struct ToolDef {
    name: &'static str,
    description: &'static str,
    parameters: fn() -> J,
}

macro_rules! tools {
    ($($name:literal => $desc:literal, $params:tt;)*) => {
        const TOOLS: &[ToolDef] = &[$(ToolDef { name: $name, description: $desc, parameters: || json!($params) }),*];
    };
}

tools! {
    "list_tables" => "List tables grouped by kind.", {"include_archived": "bool?"};
    "get_table_meta" => "Table metadata: `full` gives schema and lineage, `compact` gives a digest.", {"table": "id or name", "view": "full|compact"};
    "preview_rows" => "Paginated preview of rows, optionally selecting columns and ordering.", {"table": "id or name", "page": "int?", "page_size": "int?", "columns": "[string]?", "order_by": "{field, descending?}?"};
    "get_row" => "One row by row id, optionally limited to columns.", {"table": "id or name", "row_id": "string", "columns": "[string]?"};
    "filter_rows" => "Rows matching a predicate, paginated.", {"table": "id or name", "predicate": "[{field, op, value}]", "page": "int?", "page_size": "int?", "columns": "[string]?"};
    "distinct_values" => "Distinct values of a field with counts, optionally under a predicate.", {"table": "id or name", "field": "string", "limit": "int?", "predicate": "[clause]?"};
    "value_counts" => "Top-k most frequent values of a field, optionally under a predicate.", {"table": "id or name", "field": "string", "k": "int?", "predicate": "[clause]?"};
    "summarize_numeric" => "Count, nulls, min, max, mean and stddev for numeric fields.", {"table": "id or name", "fields": "[string]", "predicate": "[clause]?"};
    "groupby_aggregate" => "Grouped count, count_distinct, sum, avg, min or max.", {"table": "id or name", "keys": "[string]", "aggregations": "[{name, fn, field?}]", "predicate": "[clause]?"};
    "sample_rows" => "Random sample of rows, optionally seeded and column-limited.", {"table": "id or name", "n": "int", "seed": "int?", "columns": "[string]?"};
    "create_union_table" => "Derive a table concatenating schema-compatible tables.", {"tables": "[id or name]", "name": "string?"};
    "create_filtered_table" => "Derive a table of rows satisfying a predicate.", {"table": "id or name", "predicate": "[clause]", "name": "string?"};
    "create_projected_table" => "Derive a table with a subset of columns.", {"table": "id or name", "columns": "[string]", "name": "string?"};
    "create_joined_table" => "Derive a table joining two tables on key pairs.", {"left": "id or name", "right": "id or name", "on": "[{left, right}]", "name": "string?"};
    "create_grouped_table" => "Derive a table grouping rows with first, count or collect aggregations.", {"table": "id or name", "keys": "[string]", "aggregations": "[{name, op, field?}]", "name": "string?"};
    "rename_table" => "Change a table's display name.", {"table": "id or name", "name": "string"};
    "archive_table" => "Hide a table from ordinary listings, keeping its lineage.", {"table": "id or name"};
    "unarchive_table" => "Restore an archived table, optionally renaming it.", {"table": "id", "name": "string?"};
    "rename_columns" => "Derive a table with columns renamed.", {"table": "id or name", "renames": "{old: new}", "name": "string?"};
    "add_computed_columns" => "Derive a table with computed columns (cast, concat, coalesce, extract_key, first_element).", {"table": "id or name", "columns": "[{name, kind, ...}]", "name": "string?"};
    "create_results_with_source" => "Join a batch results table back to its source table through lineage columns.", {"results": "id or name", "source": "id or name", "name": "string?"};
    "drop_columns" => "Derive a table without the given columns.", {"table": "id or name", "columns": "[string]", "name": "string?"};
    "stage_single_subtask" => "Stage one literal subtask.", {"template": "{preset, instruction, bindings?, mode?, output_schema, timeout_ms?, results_name?}"};
    "stage_dataset_subtask" => "Stage a template applied to every row of a table.", {"table": "id or name", "template": "{preset, instruction, bindings, mode?, output_schema, timeout_ms?, results_name?}"};
    "remove_staged_subtask" => "Remove one staged entry.", {"entry": "string"};
    "clear_staged_subtasks" => "Remove every staged entry.", {};
    "list_subtasks" => "Executed subtasks, paginated, optionally filtered by status.", {"status": "success|logical_failure?", "page": "int?", "page_size": "int?"};
    "get_subtask_result" => "Run details of one subtask: status, attempts, metrics, output, artifacts.", {"subtask_id": "string"};
    "get_artifact" => "Artifact metadata and optionally truncated content.", {"artifact_id": "string", "include_content": "bool?"};
    "list_artifacts" => "Artifacts of the task, optionally for one subtask and with previews.", {"subtask_id": "string?", "include_previews": "bool?", "page": "int?", "page_size": "int?"};
    "write_plan" => "Replace the plan.", {"partition_strategy": "string", "steps": "[{description, status}]"};
    "write_output_contract" => "Replace the output contract and report whether it is satisfied now.", {"tables": "[{name, schema?, rows?}]"};
    "create_agent_preset" => "Create or update an agent preset.", {"name": "string", "prompt": "string", "capabilities": "[capability id]", "model_hint": "planner|worker|nano?"};
    "list_agent_presets" => "List agent presets.", {};
    "delete_agent_preset" => "Delete an agent preset.", {"name": "string"};
}

pub fn tool_names() -> Vec<&'static str> {
    TOOLS.iter().map(|t| t.name).collect()
}

pub fn tool_specs() -> Vec<ToolSpec> {
    TOOLS.iter().map(|t| ToolSpec { name: t.name.into(), description: t.description.into(), parameters: (t.parameters)() }).collect()
}

/// Cuts `text` to `budget` bytes on a char boundary, noting the cut.
pub fn truncate_to(text: String, budget: usize) -> String {
    if text.len() <= budget {
        return text;
    }
    let mut cut = budget;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}...[truncated {} bytes]", &text[..cut], text.len() - cut)
}

fn args<T: DeserializeOwned>(a: &J) -> Result<T, String> {
    let a = if a.is_null() { json!({}) } else { a.clone() };
    serde_json::from_value(a).map_err(|e| format!("invalid arguments: {e}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableArg {
    table: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OrderBy {
    field: String,
    #[serde(default)]
    descending: bool,
}

fn page_defaults() -> usize {
    1
}

fn size_defaults() -> usize {
    DEFAULT_PAGE_SIZE
}

fn project_rows(rows: &[Record], columns: Option<&[String]>, data: &TableData) -> Result<Vec<J>, String> {
    if let Some(cols) = columns {
        for c in cols {
            data.schema.require(c).map_err(err)?;
        }
    }
    Ok(rows.iter().map(|r| r.to_json(columns)).collect())
}

fn page_json(p: analytics::Page, columns: Option<&[String]>, data: &TableData) -> Result<J, String> {
    Ok(json!({
        "page": p.page,
        "page_size": p.page_size,
        "total_rows": p.total_rows,
        "total_pages": p.total_pages,
        "rows": project_rows(&p.rows, columns, data)?,
    }))
}

fn filtered(data: &TableData, predicate: Option<&Predicate>) -> Result<TableData, String> {
    match predicate {
        None => Ok(data.clone()),
        Some(p) => {
            let c = p.compile(&data.schema).map_err(err)?;
            Ok(TableData { schema: data.schema.clone(), records: data.records.iter().filter(|r| c.matches(r)).cloned().collect() })
        }
    }
}

fn table_line(t: &crate::table::Table) -> J {
    json!({"id": t.id, "name": t.name, "rows": t.row_count, "columns": t.schema.names().collect::<Vec<_>>(), "archived": t.archived})
}

impl ManagerState {
    fn table(&self, id_or_name: &str) -> Result<crate::table::Table, String> {
        self.tables.resolve(id_or_name).map_err(err)
    }

    fn data(&self, id_or_name: &str) -> Result<(crate::table::Table, Arc<TableData>), String> {
        let t = self.table(id_or_name)?;
        let d = self.tables.data(&t.id).map_err(err)?;
        Ok((t, d))
    }

    fn derive(&self, name: Option<String>, op: Operator, deps: &[String]) -> Result<String, String> {
        let ids: Vec<TableId> = deps.iter().map(|d| self.table(d).map(|t| t.id)).collect::<Result<_, _>>()?;
        let t = self.tables.derive(name.as_deref(), op, &ids).map_err(err)?;
        Ok(json!({"created": table_line(&t)}).to_string())
    }

    /// Runs one tool. `Err` carries the message shown to the model.
    pub fn call(&mut self, name: &str, a: &J) -> Result<String, String> {
        match name {
            "list_tables" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    #[serde(default)]
                    include_archived: bool,
                }
                let a: A = args(a)?;
                let l = self.tables.list(a.include_archived);
                let group = |v: &[crate::table::Table]| v.iter().map(table_line).collect::<Vec<_>>();
                Ok(json!({"leaf": group(&l.leaf), "derived": group(&l.derived), "results": group(&l.results)}).to_string())
            }
            "get_table_meta" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    #[serde(default)]
                    view: Option<String>,
                }
                let a: A = args(a)?;
                let t = self.table(&a.table)?;
                match a.view.as_deref().unwrap_or("compact") {
                    "compact" => Ok(String::from_utf8_lossy(&self.tables.digest(&t.id, self.digest_budget).map_err(err)?.to_bytes()).into_owned()),
                    "full" => {
                        let lineage = match &t.lineage.op {
                            LineageOp::Leaf { records } => json!({"op": "leaf", "records": records.id.to_hex(), "sources": t.lineage.source_refs.len()}),
                            LineageOp::Derive { operator } => json!({"op": operator, "dependencies": t.lineage.dependencies}),
                            LineageOp::BatchResults { batch_id, .. } => json!({"op": "batch_results", "batch": batch_id}),
                        };
                        Ok(json!({
                            "id": t.id, "name": t.name, "kind": t.kind, "archived": t.archived, "rows": t.row_count,
                            "schema": t.schema, "lineage": lineage, "materialized": t.materialization.is_some(),
                        })
                        .to_string())
                    }
                    other => Err(format!("unknown view `{other}`; use `full` or `compact`")),
                }
            }
            "preview_rows" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    #[serde(default = "page_defaults")]
                    page: usize,
                    #[serde(default = "size_defaults")]
                    page_size: usize,
                    #[serde(default)]
                    columns: Option<Vec<String>>,
                    #[serde(default)]
                    order_by: Option<OrderBy>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let page = match &a.order_by {
                    None => analytics::preview_rows(&d, a.page, a.page_size).map_err(err)?,
                    Some(o) => {
                        d.schema.require(&o.field).map_err(err)?;
                        let mut sorted = d.as_ref().clone();
                        sorted.records.sort_by(|x, y| {
                            let c = x.get(&o.field).cmp(y.get(&o.field));
                            (if o.descending { c.reverse() } else { c }).then_with(|| x.id.cmp(&y.id))
                        });
                        analytics::preview_rows(&sorted, a.page, a.page_size).map_err(err)?
                    }
                };
                Ok(page_json(page, a.columns.as_deref(), &d)?.to_string())
            }
            "get_row" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    row_id: String,
                    #[serde(default)]
                    columns: Option<Vec<String>>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let r = analytics::get_row(&d, &a.row_id).map_err(err)?;
                Ok(project_rows(&[r], a.columns.as_deref(), &d)?.remove(0).to_string())
            }
            "filter_rows" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    predicate: Predicate,
                    #[serde(default = "page_defaults")]
                    page: usize,
                    #[serde(default = "size_defaults")]
                    page_size: usize,
                    #[serde(default)]
                    columns: Option<Vec<String>>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let p = analytics::filter_rows(&d, &a.predicate, a.page, a.page_size).map_err(err)?;
                Ok(page_json(p, a.columns.as_deref(), &d)?.to_string())
            }
            "distinct_values" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    field: String,
                    #[serde(default)]
                    limit: Option<usize>,
                    #[serde(default)]
                    predicate: Option<Predicate>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let d = filtered(&d, a.predicate.as_ref())?;
                let limit = a.limit.unwrap_or(50);
                let distinct = analytics::distinct_values(&d, &a.field, limit).map_err(err)?;
                let counts: BTreeMap<Value, u64> = analytics::value_counts(&d, &a.field, usize::MAX).map_err(err)?.into_iter().collect();
                let values: Vec<J> = distinct.values.iter().map(|v| json!({"value": v.to_json(), "count": counts.get(v).copied().unwrap_or(0)})).collect();
                Ok(json!({"field": a.field, "total_distinct": distinct.total_distinct, "values": values}).to_string())
            }
            "value_counts" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    field: String,
                    #[serde(default)]
                    k: Option<usize>,
                    #[serde(default)]
                    predicate: Option<Predicate>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let d = filtered(&d, a.predicate.as_ref())?;
                let top = analytics::value_counts(&d, &a.field, a.k.unwrap_or(10)).map_err(err)?;
                Ok(J::Array(top.into_iter().map(|(v, n)| json!({"value": v.to_json(), "count": n})).collect()).to_string())
            }
            "summarize_numeric" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    fields: Vec<String>,
                    #[serde(default)]
                    predicate: Option<Predicate>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let d = filtered(&d, a.predicate.as_ref())?;
                Ok(serde_json::to_string(&analytics::summarize_numeric(&d, &a.fields).map_err(err)?).map_err(err)?)
            }
            "groupby_aggregate" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    keys: Vec<String>,
                    aggregations: Vec<AggregateSpec>,
                    #[serde(default)]
                    predicate: Option<Predicate>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let d = filtered(&d, a.predicate.as_ref())?;
                Ok(serde_json::to_string(&analytics::groupby_aggregate(&d, &a.keys, &a.aggregations).map_err(err)?).map_err(err)?)
            }
            "sample_rows" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    n: usize,
                    #[serde(default)]
                    seed: Option<u64>,
                    #[serde(default)]
                    columns: Option<Vec<String>>,
                }
                let a: A = args(a)?;
                let (_, d) = self.data(&a.table)?;
                let rows = analytics::sample_rows(&d, a.n, a.seed);
                Ok(J::Array(project_rows(&rows, a.columns.as_deref(), &d)?).to_string())
            }
            "create_union_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    tables: Vec<String>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::Union, &a.tables)
            }
            "create_filtered_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    predicate: Predicate,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::Filter { predicate: a.predicate }, &[a.table])
            }
            "create_projected_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    columns: Vec<String>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::Project { columns: a.columns }, &[a.table])
            }
            "create_joined_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    left: String,
                    right: String,
                    on: Vec<JoinKey>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::Join { on: a.on }, &[a.left, a.right])
            }
            "create_grouped_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    keys: Vec<String>,
                    aggregations: Vec<GroupAggregation>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::Group { keys: a.keys, aggregations: a.aggregations }, &[a.table])
            }
            "rename_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    name: String,
                }
                let a: A = args(a)?;
                let t = self.table(&a.table)?;
                Ok(json!({"renamed": table_line(&self.tables.rename(&t.id, &a.name).map_err(err)?)}).to_string())
            }
            "archive_table" => {
                let a: TableArg = args(a)?;
                let t = self.table(&a.table)?;
                Ok(json!({"archived": table_line(&self.tables.archive(&t.id).map_err(err)?)}).to_string())
            }
            "unarchive_table" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                let id = TableId::new(a.table.clone());
                let t = self.tables.get(&id).or_else(|_| self.tables.resolve(&a.table)).map_err(err)?;
                if let Some(n) = &a.name {
                    if self.tables.find_live(n).is_some() {
                        return Err(format!("name `{n}` is taken by a live table"));
                    }
                    self.tables.rename(&t.id, n).map_err(err)?;
                }
                Ok(json!({"unarchived": table_line(&self.tables.unarchive(&t.id).map_err(err)?)}).to_string())
            }
            "rename_columns" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    renames: BTreeMap<String, String>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::RenameColumns { renames: a.renames }, &[a.table])
            }
            "add_computed_columns" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    columns: Vec<ComputedColumn>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::AddComputedColumns { columns: a.columns }, &[a.table])
            }
            "create_results_with_source" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    results: String,
                    source: String,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                let r = self.table(&a.results)?;
                if r.kind != TableKind::Results {
                    return Err(format!("`{}` is not a results table", a.results));
                }
                self.derive(a.name, Operator::ResultsWithSource, &[a.results, a.source])
            }
            "drop_columns" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    columns: Vec<String>,
                    #[serde(default)]
                    name: Option<String>,
                }
                let a: A = args(a)?;
                self.derive(a.name, Operator::DropColumns { columns: a.columns }, &[a.table])
            }
            "stage_single_subtask" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    template: SubtaskTemplate,
                }
                let a: A = args(a)?;
                let e = self.staging.stage_single(a.template, &self.presets).map_err(err)?;
                Ok(json!({"staged": e.id, "subtasks": 1, "staged_entries": self.staging.len()}).to_string())
            }
            "stage_dataset_subtask" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    table: String,
                    template: SubtaskTemplate,
                }
                let a: A = args(a)?;
                let t = self.table(&a.table).or_else(|e| self.tables.get(&TableId::new(a.table.clone())).map_err(|_| e))?;
                let e = self.staging.stage_dataset(a.template, &t.id, &self.tables, &self.presets).map_err(err)?;
                Ok(json!({"staged": e.id, "subtasks": t.row_count, "staged_entries": self.staging.len()}).to_string())
            }
            "remove_staged_subtask" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    entry: String,
                }
                let a: A = args(a)?;
                let e = self.staging.remove(&a.entry).map_err(err)?;
                Ok(json!({"removed": e.id, "staged_entries": self.staging.len()}).to_string())
            }
            "clear_staged_subtasks" => {
                let _: BTreeMap<String, J> = args(a)?;
                let n = self.staging.clear();
                Ok(json!({"cleared": n}).to_string())
            }
            "list_subtasks" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    #[serde(default)]
                    status: Option<RunStatus>,
                    #[serde(default = "page_defaults")]
                    page: usize,
                    #[serde(default = "size_defaults")]
                    page_size: usize,
                }
                let a: A = args(a)?;
                let p = self.state.runs(&self.task_id, a.status, a.page, a.page_size).map_err(err)?;
                let items: Vec<J> = p
                    .items
                    .iter()
                    .map(|r| json!({"subtask_id": r.subtask_id, "batch": r.batch_id, "status": r.status, "attempts": r.attempts.len()}))
                    .collect();
                Ok(json!({"page": p.page, "page_size": p.page_size, "total": p.total, "subtasks": items}).to_string())
            }
            "get_subtask_result" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    subtask_id: String,
                }
                let a: A = args(a)?;
                let r = self.state.run(&a.subtask_id).map_err(err)?;
                Ok(serde_json::to_string(&r).map_err(err)?)
            }
            "get_artifact" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    artifact_id: String,
                    #[serde(default)]
                    include_content: bool,
                }
                let a: A = args(a)?;
                let art = self.state.artifact(&a.artifact_id).map_err(err)?;
                let mut out = json!({
                    "artifact_id": art.artifact_id, "subtask_id": art.subtask_id, "name": art.name,
                    "size": art.blob.size, "media_hint": art.media_hint, "blob": art.blob.id.to_hex(),
                });
                if a.include_content {
                    let bytes = self.tables.blobs().get(&art.blob).map_err(err)?;
                    let text = String::from_utf8_lossy(&bytes).into_owned();
                    let excerpt = truncate_to(text, self.excerpt_bytes);
                    out["content"] = J::String(excerpt);
                    out["content_truncated"] = J::Bool(bytes.len() > self.excerpt_bytes);
                }
                Ok(out.to_string())
            }
            "list_artifacts" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    #[serde(default)]
                    subtask_id: Option<String>,
                    #[serde(default)]
                    include_previews: bool,
                    #[serde(default = "page_defaults")]
                    page: usize,
                    #[serde(default = "size_defaults")]
                    page_size: usize,
                }
                let a: A = args(a)?;
                let p = self.state.artifacts(&self.task_id, a.subtask_id.as_deref(), a.page, a.page_size).map_err(err)?;
                let items: Vec<J> = p
                    .items
                    .iter()
                    .map(|x| {
                        let mut o = json!({"artifact_id": x.artifact_id, "subtask_id": x.subtask_id, "name": x.name, "size": x.blob.size});
                        if a.include_previews {
                            o["preview"] = J::String(x.preview.clone());
                        }
                        o
                    })
                    .collect();
                Ok(json!({"page": p.page, "total": p.total, "artifacts": items}).to_string())
            }
            "write_plan" => {
                let plan: Plan = args(a)?;
                self.plan.replace(plan).map_err(err)?;
                Ok(format!("plan updated\n{}", self.plan.render()))
            }
            "write_output_contract" => {
                let contract: OutputContract = args(a)?;
                let status = contract.check(&self.tables);
                let satisfied = status.iter().all(|s| s.satisfied);
                self.contract = contract;
                Ok(json!({"satisfied": satisfied, "tables": status}).to_string())
            }
            "create_agent_preset" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    name: String,
                    prompt: String,
                    #[serde(default)]
                    capabilities: Vec<String>,
                    #[serde(default)]
                    model_hint: Option<ModelGrade>,
                }
                let a: A = args(a)?;
                let preset = AgentPreset { name: a.name, prompt: a.prompt, capabilities: a.capabilities, model_hint: a.model_hint };
                let p = self.presets.upsert(preset, self.registry.as_ref()).map_err(err)?;
                Ok(json!({"preset": p.name, "capabilities": p.capabilities}).to_string())
            }
            "list_agent_presets" => {
                let _: BTreeMap<String, J> = args(a)?;
                let list: Vec<J> = self
                    .presets
                    .list()
                    .iter()
                    .map(|p| json!({"name": p.name, "capabilities": p.capabilities, "model_hint": p.model_hint}))
                    .collect();
                Ok(J::Array(list).to_string())
            }
            "delete_agent_preset" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct A {
                    name: String,
                }
                let a: A = args(a)?;
                self.presets.delete(&a.name).map_err(err)?;
                Ok(json!({"deleted": a.name}).to_string())
            }
            other => Err(format!("unknown tool `{other}`")),
        }
    }
}
