use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::table::{FieldType, Schema, TableStore};

use super::ManagerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    InProgress,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub description: String,
    #[serde(default = "pending")]
    pub status: StepStatus,
}

fn pending() -> StepStatus {
    StepStatus::Pending
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub partition_strategy: String,
    #[serde(default)]
    pub steps: Vec<PlanStep>,
}

impl Plan {
    /// Replaces the plan. A step that keeps its description may not move
    /// back to an earlier status.
    pub fn replace(&mut self, next: Plan) -> Result<(), ManagerError> {
        for step in &next.steps {
            if let Some(old) = self.steps.iter().find(|s| s.description == step.description) {
                if step.status < old.status {
                    return Err(ManagerError::PlanRegression { step: step.description.clone(), from: old.status, to: step.status });
                }
            }
        }
        *self = next;
        Ok(())
    }

    pub fn render(&self) -> String {
        if self.partition_strategy.is_empty() && self.steps.is_empty() {
            return "(no plan yet)".into();
        }
        let mut out = format!("partition strategy: {}\n", self.partition_strategy);
        for (i, s) in self.steps.iter().enumerate() {
            let mark = match s.status {
                StepStatus::Pending => " ",
                StepStatus::InProgress => "~",
                StepStatus::Done => "x",
            };
            out.push_str(&format!("{}. [{mark}] {}\n", i + 1, s.description));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractField {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    #[serde(default)]
    pub schema: Option<Vec<ContractField>>,
    #[serde(default)]
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecStatus {
    pub name: String,
    pub satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputContract {
    #[serde(default)]
    pub tables: Vec<TableSpec>,
}

fn type_set(fields: &[ContractField]) -> BTreeSet<(String, FieldType)> {
    fields.iter().map(|f| (f.name.clone(), f.ty)).collect()
}

fn schema_set(schema: &Schema) -> BTreeSet<(String, FieldType)> {
    schema.fields().iter().map(|f| (f.name.clone(), f.ty)).collect()
}

impl TableSpec {
    pub fn check(&self, tables: &TableStore) -> SpecStatus {
        let fail = |reason: String| SpecStatus { name: self.name.clone(), satisfied: false, reason: Some(reason) };
        let Some(t) = tables.find_live(&self.name) else {
            return fail(format!("no live table named `{}`", self.name));
        };
        if let Some(fields) = &self.schema {
            let want = type_set(fields);
            let have = schema_set(&t.schema);
            if want != have {
                let missing: Vec<String> = want.difference(&have).map(|(n, ty)| format!("{n}:{}", ty.name())).collect();
                let extra: Vec<String> = have.difference(&want).map(|(n, ty)| format!("{n}:{}", ty.name())).collect();
                return fail(format!("schema of `{}` differs: missing [{}], unexpected [{}]", self.name, missing.join(", "), extra.join(", ")));
            }
        }
        if let Some(rows) = self.rows {
            if t.row_count != rows {
                return fail(format!("`{}` has {} rows, expected {rows}", self.name, t.row_count));
            }
        }
        SpecStatus { name: self.name.clone(), satisfied: true, reason: None }
    }
}

impl OutputContract {
    pub fn check(&self, tables: &TableStore) -> Vec<SpecStatus> {
        self.tables.iter().map(|s| s.check(tables)).collect()
    }

    pub fn is_satisfied(&self, tables: &TableStore) -> bool {
        self.check(tables).iter().all(|s| s.satisfied)
    }

    pub fn render(&self, tables: &TableStore) -> String {
        if self.tables.is_empty() {
            return "(no output contract yet)".into();
        }
        let mut out = String::new();
        for (spec, st) in self.tables.iter().zip(self.check(tables)) {
            let mut line = format!("- `{}`", spec.name);
            if let Some(f) = &spec.schema {
                line.push_str(&format!(" fields {{{}}}", f.iter().map(|f| format!("{}:{}", f.name, f.ty.name())).collect::<Vec<_>>().join(", ")));
            }
            if let Some(r) = spec.rows {
                line.push_str(&format!(" rows={r}"));
            }
            match st.reason {
                None => line.push_str(" [satisfied]"),
                Some(r) => line.push_str(&format!(" [unsatisfied: {r}]")),
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}
