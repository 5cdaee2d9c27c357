//! The table operator algebra.
//!
//! Every operator is a pure function from input tables to an output table.
//! Outputs are always sorted by row id, and derived row ids are built from
//! input row ids with injective encodings, so re-running an operator on the
//! same inputs reproduces the same records, ids included:
//!
//! | operator                 | output row id                      |
//! |--------------------------|------------------------------------|
//! | union                    | `<input index>#<row id>`           |
//! | join, results_with_source| `<len(left id)>:<left id><right id>` |
//! | group                    | `g<JSON array of key values>`      |
//! | everything else          | the input row id                   |

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Field, FieldType, Predicate, Record, RowId, Schema, TableData, TableError, TableId, Value};

/// Columns every batch-results table carries, linking each result back to the
/// row it was expanded from.
pub const LINEAGE_COLUMNS: [&str; 3] = ["__subtask_id", "__source_table", "__source_row"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinKey {
    pub left: String,
    pub right: String,
}

impl JoinKey {
    pub fn new(left: impl Into<String>, right: impl Into<String>) -> Self {
        JoinKey { left: left.into(), right: right.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    First,
    Count,
    Collect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregation {
    pub name: String,
    #[serde(rename = "op")]
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComputeExpr {
    Cast { field: String, to: FieldType },
    Concat {
        fields: Vec<String>,
        #[serde(default)]
        separator: String,
    },
    Coalesce { fields: Vec<String> },
    ExtractKey {
        field: String,
        key: String,
        #[serde(default = "structured")]
        to: FieldType,
    },
    FirstElement { field: String },
}

fn structured() -> FieldType {
    FieldType::Structured
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputedColumn {
    pub name: String,
    #[serde(flatten)]
    pub expr: ComputeExpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operator {
    Union,
    Filter { predicate: Predicate },
    Project { columns: Vec<String> },
    Join { on: Vec<JoinKey> },
    Group { keys: Vec<String>, aggregations: Vec<GroupAggregation> },
    RenameColumns { renames: BTreeMap<String, String> },
    AddComputedColumns { columns: Vec<ComputedColumn> },
    DropColumns { columns: Vec<String> },
    ResultsWithSource,
}

/// An operator input: the table id plus its materialized contents.
pub(crate) struct Input<'a> {
    pub id: &'a TableId,
    pub data: &'a TableData,
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::Union => "union",
            Operator::Filter { .. } => "filter",
            Operator::Project { .. } => "project",
            Operator::Join { .. } => "join",
            Operator::Group { .. } => "group",
            Operator::RenameColumns { .. } => "rename_columns",
            Operator::AddComputedColumns { .. } => "add_computed_columns",
            Operator::DropColumns { .. } => "drop_columns",
            Operator::ResultsWithSource => "results_with_source",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Operator::Union => n >= 1,
            Operator::Join { .. } | Operator::ResultsWithSource => n == 2,
            _ => n == 1,
        }
    }

    pub(crate) fn apply(&self, inputs: &[Input<'_>]) -> Result<TableData, TableError> {
        if !self.arity_ok(inputs.len()) {
            return Err(TableError::InvalidParams(format!(
                "{} does not accept {} input table(s)",
                self.name(),
                inputs.len()
            )));
        }
        let out = match self {
            Operator::Union => union(inputs)?,
            Operator::Filter { predicate } => filter(inputs[0].data, predicate)?,
            Operator::Project { columns } => project(inputs[0].data, columns)?,
            Operator::Join { on } => join(inputs[0].data, inputs[1].data, on)?,
            Operator::Group { keys, aggregations } => group(inputs[0].data, keys, aggregations)?,
            Operator::RenameColumns { renames } => rename(inputs[0].data, renames)?,
            Operator::AddComputedColumns { columns } => add_computed(inputs[0].data, columns)?,
            Operator::DropColumns { columns } => drop_columns(inputs[0].data, columns)?,
            Operator::ResultsWithSource => results_with_source(&inputs[0], &inputs[1])?,
        };
        Ok(out.sorted())
    }
}

pub(crate) fn pair_id(left: &RowId, right: &RowId) -> RowId {
    RowId(format!("{}:{}{}", left.0.len(), left.0, right.0))
}

fn union(inputs: &[Input<'_>]) -> Result<TableData, TableError> {
    let first = &inputs[0].data.schema;
    let mut fields: Vec<Field> = first.fields().to_vec();
    for input in &inputs[1..] {
        let s = &input.data.schema;
        if !s.compatible_with(first) {
            return Err(TableError::IncompatibleSchemas(format!(
                "union of `{}` ({}) with `{}` ({})",
                inputs[0].id,
                first.summary(),
                input.id,
                s.summary()
            )));
        }
        for f in fields.iter_mut() {
            f.nullable |= s.field(&f.name).is_some_and(|o| o.nullable);
        }
    }
    let schema = Schema::new(fields)?;
    let mut records = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        for r in &input.data.records {
            records.push(Record { id: RowId(format!("{i}#{}", r.id)), values: r.values.clone() });
        }
    }
    Ok(TableData { schema, records })
}

fn filter(data: &TableData, predicate: &Predicate) -> Result<TableData, TableError> {
    let p = predicate.compile(&data.schema)?;
    Ok(TableData {
        schema: data.schema.clone(),
        records: data.records.iter().filter(|r| p.matches(r)).cloned().collect(),
    })
}

fn unique_names(names: &[String], what: &str) -> Result<(), TableError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(TableError::InvalidParams(format!("duplicate {what} `{n}`")));
        }
    }
    Ok(())
}

fn project(data: &TableData, columns: &[String]) -> Result<TableData, TableError> {
    if columns.is_empty() {
        return Err(TableError::InvalidParams("projection needs at least one column".into()));
    }
    unique_names(columns, "column")?;
    let fields = columns
        .iter()
        .map(|c| data.schema.require(c).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    let schema = Schema::new(fields)?;
    let records = data
        .records
        .iter()
        .map(|r| Record {
            id: r.id.clone(),
            values: columns.iter().map(|c| (c.clone(), r.get(c).clone())).collect(),
        })
        .collect();
    Ok(TableData { schema, records })
}

fn fresh_name(base: &str, taken: &BTreeSet<String>) -> String {
    let mut name = base.to_string();
    while taken.contains(&name) {
        name.push_str("_r");
    }
    name
}

/// Output layout of a two-sided join: left columns verbatim, then the right
/// side's non-dropped columns, renamed with `_r` suffixes on collision.
fn merged_layout(left: &Schema, right: &Schema, drop_right: &BTreeSet<&str>) -> (Vec<Field>, Vec<(String, String)>) {
    let mut fields: Vec<Field> = left.fields().to_vec();
    let mut taken: BTreeSet<String> = left.names().map(str::to_string).collect();
    let mut right_map = Vec::new();
    for f in right.fields() {
        if drop_right.contains(f.name.as_str()) {
            continue;
        }
        let name = fresh_name(&f.name, &taken);
        taken.insert(name.clone());
        right_map.push((f.name.clone(), name.clone()));
        fields.push(Field { name, ty: f.ty, nullable: f.nullable });
    }
    (fields, right_map)
}

fn join(left: &TableData, right: &TableData, on: &[JoinKey]) -> Result<TableData, TableError> {
    if on.is_empty() {
        return Err(TableError::MissingJoinKey("at least one key pair is required".into()));
    }
    for k in on {
        let lf = left.schema.field(&k.left).ok_or_else(|| TableError::MissingJoinKey(format!("left side has no `{}`", k.left)))?;
        let rf = right.schema.field(&k.right).ok_or_else(|| TableError::MissingJoinKey(format!("right side has no `{}`", k.right)))?;
        if lf.ty != rf.ty {
            return Err(TableError::TypeMismatch {
                field: k.left.clone(),
                reason: format!("join key types differ: {} vs {}", lf.ty, rf.ty),
            });
        }
    }
    let drop: BTreeSet<&str> = on.iter().map(|k| k.right.as_str()).collect();
    let (fields, right_map) = merged_layout(&left.schema, &right.schema, &drop);
    let schema = Schema::new(fields)?;

    let mut index: BTreeMap<Vec<&Value>, Vec<&Record>> = BTreeMap::new();
    for r in &right.records {
        let key: Vec<&Value> = on.iter().map(|k| r.get(&k.right)).collect();
        if key.iter().any(|v| v.is_null()) {
            continue;
        }
        index.entry(key).or_default().push(r);
    }
    let mut records = Vec::new();
    for l in &left.records {
        let key: Vec<&Value> = on.iter().map(|k| l.get(&k.left)).collect();
        if key.iter().any(|v| v.is_null()) {
            continue;
        }
        for r in index.get(&key).into_iter().flatten() {
            let mut values = l.values.clone();
            for (src, dst) in &right_map {
                values.insert(dst.clone(), r.get(src).clone());
            }
            records.push(Record { id: pair_id(&l.id, &r.id), values });
        }
    }
    Ok(TableData { schema, records })
}

fn group(data: &TableData, keys: &[String], aggs: &[GroupAggregation]) -> Result<TableData, TableError> {
    unique_names(keys, "group key")?;
    let mut fields = keys
        .iter()
        .map(|k| data.schema.require(k).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    for a in aggs {
        if keys.contains(&a.name) {
            return Err(TableError::InvalidParams(format!("aggregation `{}` collides with a group key", a.name)));
        }
        let source = a.field.as_deref().map(|f| data.schema.require(f)).transpose()?;
        let field = match (a.aggregate, source) {
            (Aggregate::Count, _) => Field::new(&a.name, FieldType::Integer),
            (Aggregate::First, Some(f)) => Field::nullable(&a.name, f.ty),
            (Aggregate::Collect, Some(_)) => Field::new(&a.name, FieldType::TextList),
            (agg, None) => {
                return Err(TableError::InvalidParams(format!("{agg:?} aggregation `{}` needs a field", a.name)))
            }
        };
        fields.push(field);
    }
    let schema = Schema::new(fields)?;

    let mut groups: BTreeMap<Vec<Value>, Vec<&Record>> = BTreeMap::new();
    for r in &data.records {
        groups.entry(keys.iter().map(|k| r.get(k).clone()).collect()).or_default().push(r);
    }
    let mut records = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let id_json: Vec<serde_json::Value> = key.iter().map(Value::to_json).collect();
        let mut values: BTreeMap<String, Value> = keys.iter().cloned().zip(key).collect();
        for a in aggs {
            let v = match a.aggregate {
                Aggregate::Count => match &a.field {
                    None => Value::Integer(members.len() as i64),
                    Some(f) => Value::Integer(members.iter().filter(|r| !r.get(f).is_null()).count() as i64),
                },
                Aggregate::First => members[0].get(a.field.as_deref().unwrap_or_default()).clone(),
                Aggregate::Collect => {
                    let f = a.field.as_deref().unwrap_or_default();
                    Value::TextList(members.iter().map(|r| r.get(f)).filter(|v| !v.is_null()).map(Value::render).collect())
                }
            };
            values.insert(a.name.clone(), v);
        }
        let id = RowId(format!("g{}", serde_json::Value::Array(id_json)));
        records.push(Record { id, values });
    }
    Ok(TableData { schema, records })
}

fn rename(data: &TableData, renames: &BTreeMap<String, String>) -> Result<TableData, TableError> {
    for old in renames.keys() {
        data.schema.require(old)?;
    }
    let fields: Vec<Field> = data
        .schema
        .fields()
        .iter()
        .map(|f| Field { name: renames.get(&f.name).cloned().unwrap_or_else(|| f.name.clone()), ..f.clone() })
        .collect();
    let schema = Schema::new(fields).map_err(|e| TableError::InvalidParams(format!("rename produces {e}")))?;
    let records = data
        .records
        .iter()
        .map(|r| Record {
            id: r.id.clone(),
            values: r
                .values
                .iter()
                .map(|(k, v)| (renames.get(k).cloned().unwrap_or_else(|| k.clone()), v.clone()))
                .collect(),
        })
        .collect();
    Ok(TableData { schema, records })
}

fn cast(v: &Value, to: FieldType) -> Value {
    if v.conforms_to(to) {
        return v.clone();
    }
    match (v, to) {
        (Value::Null, _) => Value::Null,
        (Value::Structured(j), ty) => match Value::from_json(ty, j) {
            Ok(v) if v.conforms_to(ty) => v,
            _ if ty == FieldType::Text => Value::Text(j.to_string()),
            _ => Value::Null,
        },
        (_, FieldType::Text) => Value::Text(v.render()),
        (Value::Text(s), FieldType::Integer) => s.trim().parse().map(Value::Integer).unwrap_or(Value::Null),
        (Value::Text(s), FieldType::Real) => {
            s.trim().parse::<f64>().ok().filter(|r| r.is_finite()).map(Value::Real).unwrap_or(Value::Null)
        }
        (Value::Text(s), FieldType::Boolean) => match s.trim() {
            "true" => Value::Boolean(true),
            "false" => Value::Boolean(false),
            _ => Value::Null,
        },
        (Value::Text(s), FieldType::Structured) => {
            serde_json::from_str(s).map(Value::Structured).unwrap_or(Value::Null)
        }
        (Value::Integer(i), FieldType::Real) => Value::Real(*i as f64),
        (Value::Real(r), FieldType::Integer) if r.is_finite() && r.abs() < 9.2e18 => Value::Integer(r.trunc() as i64),
        (Value::Integer(i), FieldType::Boolean) => Value::Boolean(*i != 0),
        (Value::Boolean(b), FieldType::Integer) => Value::Integer(*b as i64),
        (Value::Text(s), FieldType::TextList) => Value::TextList(vec![s.clone()]),
        _ => Value::Null,
    }
}

fn add_computed(data: &TableData, columns: &[ComputedColumn]) -> Result<TableData, TableError> {
    let mut fields = data.schema.fields().to_vec();
    for c in columns {
        let ty_of = |f: &str| data.schema.require(f).map(|f| f.ty);
        let field = match &c.expr {
            ComputeExpr::Cast { field, to } => {
                ty_of(field)?;
                Field::nullable(&c.name, *to)
            }
            ComputeExpr::Concat { fields: srcs, .. } => {
                for f in srcs {
                    ty_of(f)?;
                }
                Field::new(&c.name, FieldType::Text)
            }
            ComputeExpr::Coalesce { fields: srcs } => {
                let first = srcs.first().ok_or_else(|| TableError::InvalidParams("coalesce needs fields".into()))?;
                let ty = ty_of(first)?;
                for f in srcs {
                    if ty_of(f)? != ty {
                        return Err(TableError::TypeMismatch { field: f.clone(), reason: "coalesce operands differ in type".into() });
                    }
                }
                let nullable = srcs.iter().all(|f| data.schema.field(f).is_none_or(|f| f.nullable));
                Field { name: c.name.clone(), ty, nullable }
            }
            ComputeExpr::ExtractKey { field, to, .. } => {
                if ty_of(field)? != FieldType::Structured {
                    return Err(TableError::TypeMismatch { field: field.clone(), reason: "key extraction needs a structured field".into() });
                }
                Field::nullable(&c.name, *to)
            }
            ComputeExpr::FirstElement { field } => {
                if ty_of(field)? != FieldType::TextList {
                    return Err(TableError::TypeMismatch { field: field.clone(), reason: "first_element needs a text_list field".into() });
                }
                Field::nullable(&c.name, FieldType::Text)
            }
        };
        fields.push(field);
    }
    let schema = Schema::new(fields).map_err(|e| TableError::InvalidParams(format!("computed columns: {e}")))?;
    let records = data
        .records
        .iter()
        .map(|r| {
            let mut values = r.values.clone();
            for c in columns {
                let v = match &c.expr {
                    ComputeExpr::Cast { field, to } => cast(r.get(field), *to),
                    ComputeExpr::Concat { fields, separator } => {
                        Value::Text(fields.iter().map(|f| r.get(f).render()).collect::<Vec<_>>().join(separator))
                    }
                    ComputeExpr::Coalesce { fields } => {
                        fields.iter().map(|f| r.get(f)).find(|v| !v.is_null()).cloned().unwrap_or(Value::Null)
                    }
                    ComputeExpr::ExtractKey { field, key, to } => match r.get(field) {
                        Value::Structured(j) => j.get(key).map(|j| cast(&Value::Structured(j.clone()), *to)).unwrap_or(Value::Null),
                        _ => Value::Null,
                    },
                    ComputeExpr::FirstElement { field } => match r.get(field) {
                        Value::TextList(l) => l.first().cloned().map(Value::Text).unwrap_or(Value::Null),
                        _ => Value::Null,
                    },
                };
                values.insert(c.name.clone(), v);
            }
            Record { id: r.id.clone(), values }
        })
        .collect();
    Ok(TableData { schema, records })
}

fn drop_columns(data: &TableData, columns: &[String]) -> Result<TableData, TableError> {
    for c in columns {
        data.schema.require(c)?;
    }
    let keep: Vec<String> = data.schema.names().filter(|n| !columns.iter().any(|c| c == n)).map(str::to_string).collect();
    if keep.is_empty() {
        return Err(TableError::InvalidParams("cannot drop every column".into()));
    }
    project(data, &keep)
}

fn results_with_source(results: &Input<'_>, source: &Input<'_>) -> Result<TableData, TableError> {
    let [_, table_col, row_col] = LINEAGE_COLUMNS;
    for c in [table_col, row_col] {
        if results.data.schema.field(c).is_none() {
            return Err(TableError::InvalidParams(format!("`{}` has no lineage column `{c}`", results.id)));
        }
    }
    if let Some(r) = results.data.records.iter().find(|r| r.get(table_col).as_text() != Some(source.id.as_str())) {
        return Err(TableError::InvalidParams(format!(
            "row `{}` of `{}` was not expanded from `{}`",
            r.id, results.id, source.id
        )));
    }
    let (fields, right_map) = merged_layout(&source.data.schema, &results.data.schema, &BTreeSet::new());
    let schema = Schema::new(fields)?;
    let by_id: BTreeMap<&str, &Record> = source.data.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut records = Vec::new();
    for res in &results.data.records {
        let Some(src) = res.get(row_col).as_text().and_then(|id| by_id.get(id)) else { continue };
        let mut values = src.values.clone();
        for (from, to) in &right_map {
            values.insert(to.clone(), res.get(from).clone());
        }
        records.push(Record { id: pair_id(&src.id, &res.id), values });
    }
    Ok(TableData { schema, records })
}
