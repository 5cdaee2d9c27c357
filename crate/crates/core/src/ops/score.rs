//! Structural scoring of a task's output tables against a benchmark
//! contract. Each tier contributes three binary checks (presence, reference
//! resolution, constraints) and the score is their mean.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::manager::ContractField;
use crate::table::{Table, TableData, TableId, TableStore, Value};

use super::OpsError;

/// Reference from one column of a tier's table into another table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub column: String,
    /// Live table name.
    pub table: String,
    /// Target column; the row id when absent.
    #[serde(default)]
    pub key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tier {
    pub name: String,
    pub table: String,
    #[serde(default)]
    pub rows: Option<usize>,
    /// Fields that must exist with these types.
    #[serde(default)]
    pub fields: Vec<ContractField>,
    /// Fields that must be non-null and non-empty in every row.
    #[serde(default)]
    pub non_empty: Vec<String>,
    /// Without one, rows must trace to their subtask and, when they carry
    /// source lineage, to a live source row.
    #[serde(default)]
    pub reference: Option<Reference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkContract {
    #[serde(default)]
    pub name: String,
    pub tiers: Vec<Tier>,
}

impl BenchmarkContract {
    pub fn load(path: &Path) -> Result<Self, OpsError> {
        let text = std::fs::read_to_string(path).map_err(|e| OpsError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| OpsError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Presence,
    Reference,
    Constraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub tier: String,
    pub kind: CheckKind,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralScore {
    pub score: f64,
    pub passed: usize,
    pub total: usize,
    pub checks: Vec<Check>,
}

fn data_of(tables: &TableStore, t: &Table) -> Result<std::sync::Arc<TableData>, String> {
    tables.data(&t.id).map_err(|e| e.to_string())
}

fn key_set(data: &TableData, key: Option<&str>) -> BTreeSet<String> {
    data.records
        .iter()
        .map(|r| match key {
            None => r.id.to_string(),
            Some(k) => r.get(k).render(),
        })
        .collect()
}

fn check_reference(tables: &TableStore, data: &TableData, reference: Option<&Reference>) -> Result<(), String> {
    match reference {
        Some(r) => {
            data.schema.require(&r.column).map_err(|e| e.to_string())?;
            let target = tables.find_live(&r.table).ok_or_else(|| format!("no live table named `{}`", r.table))?;
            let target_data = data_of(tables, &target)?;
            if let Some(k) = &r.key {
                target_data.schema.require(k).map_err(|e| e.to_string())?;
            }
            let keys = key_set(&target_data, r.key.as_deref());
            for rec in &data.records {
                let v = rec.get(&r.column);
                if v.is_null() || !keys.contains(&v.render()) {
                    return Err(format!("row `{}`: `{}` = {} does not resolve in `{}`", rec.id, r.column, v.render(), r.table));
                }
            }
            Ok(())
        }
        None => {
            let [sub, src_table, src_row] = crate::table::LINEAGE_COLUMNS;
            data.schema.require(sub).map_err(|_| format!("no `{sub}` column; not a results table"))?;
            for rec in &data.records {
                match rec.get(sub) {
                    Value::Text(s) if *s == rec.id.to_string() => {}
                    other => return Err(format!("row `{}`: `{sub}` is {}", rec.id, other.render())),
                }
                if let Value::Text(t) = rec.get(src_table) {
                    let source = tables.get(&TableId::new(t.clone())).map_err(|_| format!("row `{}`: source table `{t}` is unknown", rec.id))?;
                    let source_data = data_of(tables, &source)?;
                    let row = rec.get(src_row).render();
                    if !source_data.records.iter().any(|r| r.id.to_string() == row) {
                        return Err(format!("row `{}`: source row `{row}` is not in `{t}`", rec.id));
                    }
                }
            }
            Ok(())
        }
    }
}

fn check_constraints(tier: &Tier, table: &Table, data: &TableData) -> Result<(), String> {
    if let Some(n) = tier.rows {
        if table.row_count != n {
            return Err(format!("{} rows, expected {n}", table.row_count));
        }
    }
    for f in &tier.fields {
        let have = data.schema.require(&f.name).map_err(|e| e.to_string())?;
        if have.ty != f.ty {
            return Err(format!("`{}` is {}, expected {}", f.name, have.ty.name(), f.ty.name()));
        }
    }
    for name in &tier.non_empty {
        data.schema.require(name).map_err(|e| e.to_string())?;
        for rec in &data.records {
            let v = rec.get(name);
            let empty = match v {
                Value::Null => true,
                Value::Text(s) => s.trim().is_empty(),
                Value::TextList(l) => l.is_empty(),
                _ => false,
            };
            if empty {
                return Err(format!("row `{}`: `{name}` is empty", rec.id));
            }
        }
    }
    Ok(())
}

/// Scores `tables` against `contract`. A tier whose table is missing fails
/// all three of its checks.
pub fn structural_score(tables: &TableStore, contract: &BenchmarkContract) -> StructuralScore {
    let mut checks = Vec::with_capacity(contract.tiers.len() * 3);
    for tier in &contract.tiers {
        let mut push = |kind, r: Result<(), String>| checks.push(Check { tier: tier.name.clone(), kind, passed: r.is_ok(), detail: r.err() });
        let found = tables.find_live(&tier.table).ok_or_else(|| format!("no live table named `{}`", tier.table));
        let loaded = found.and_then(|t| data_of(tables, &t).map(|d| (t, d)));
        match loaded {
            Err(e) => {
                push(CheckKind::Presence, Err(e.clone()));
                push(CheckKind::Reference, Err(e.clone()));
                push(CheckKind::Constraint, Err(e));
            }
            Ok((t, d)) => {
                push(CheckKind::Presence, Ok(()));
                push(CheckKind::Reference, check_reference(tables, &d, tier.reference.as_ref()));
                push(CheckKind::Constraint, check_constraints(tier, &t, &d));
            }
        }
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    let total = checks.len();
    let score = if total == 0 { 1.0 } else { passed as f64 / total as f64 };
    StructuralScore { score, passed, total, checks }
}
