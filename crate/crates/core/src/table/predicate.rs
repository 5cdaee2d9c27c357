//! Conjunctive row predicates.
//!
//! A predicate is a list of clauses that must all hold. Clauses are compiled
//! against a schema before use, which checks that every field exists and that
//! the comparator makes sense for the field's type. A null cell satisfies
//! only `is_null`.

use serde::{Deserialize, Serialize};

use super::{FieldType, Record, Schema, TableError, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Eq,
    Neq,
    Lt,
    Lte,
    Gt,
    Gte,
    Contains,
    IsNull,
    IsNotNull,
    InSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub field: String,
    pub op: Comparator,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub value: serde_json::Value,
}

impl Clause {
    pub fn new(field: impl Into<String>, op: Comparator, value: serde_json::Value) -> Self {
        Clause { field: field.into(), op, value }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predicate {
    pub clauses: Vec<Clause>,
}

impl Predicate {
    pub fn all() -> Self {
        Predicate::default()
    }

    pub fn and(mut self, clause: Clause) -> Self {
        self.clauses.push(clause);
        self
    }

    pub fn compile(&self, schema: &Schema) -> Result<CompiledPredicate, TableError> {
        let mut out = Vec::with_capacity(self.clauses.len());
        for c in &self.clauses {
            let field = schema.require(&c.field)?;
            let mismatch = |reason: String| TableError::TypeMismatch { field: c.field.clone(), reason };
            let operand = match c.op {
                Comparator::IsNull | Comparator::IsNotNull => Operand::None,
                Comparator::Eq | Comparator::Neq => Operand::One(literal(field.ty, &c.value).map_err(mismatch)?),
                Comparator::Lt | Comparator::Lte | Comparator::Gt | Comparator::Gte => {
                    if !matches!(field.ty, FieldType::Text | FieldType::Integer | FieldType::Real | FieldType::Boolean) {
                        return Err(mismatch(format!("{:?} is not defined for {}", c.op, field.ty)));
                    }
                    Operand::One(literal(field.ty, &c.value).map_err(mismatch)?)
                }
                Comparator::Contains => match field.ty {
                    FieldType::Text | FieldType::TextList => {
                        let s = c.value.as_str().ok_or_else(|| mismatch("contains expects a text operand".into()))?;
                        Operand::Text(s.to_string())
                    }
                    other => return Err(mismatch(format!("contains is not defined for {other}"))),
                },
                Comparator::InSet => {
                    if matches!(field.ty, FieldType::Structured | FieldType::TextList) {
                        return Err(mismatch(format!("in_set is not defined for {}", field.ty)));
                    }
                    let items = c.value.as_array().ok_or_else(|| mismatch("in_set expects an array".into()))?;
                    let mut set = Vec::with_capacity(items.len());
                    for item in items {
                        set.push(literal(field.ty, item).map_err(mismatch)?);
                    }
                    set.sort();
                    set.dedup();
                    Operand::Set(set)
                }
            };
            out.push(CompiledClause { field: c.field.clone(), op: c.op, operand });
        }
        Ok(CompiledPredicate { clauses: out })
    }
}

fn literal(ty: FieldType, json: &serde_json::Value) -> Result<Value, String> {
    match Value::from_json(ty, json)? {
        Value::Null => Err("operand must not be null".into()),
        v => Ok(v),
    }
}

#[derive(Debug, Clone)]
enum Operand {
    None,
    One(Value),
    Text(String),
    Set(Vec<Value>),
}

#[derive(Debug, Clone)]
struct CompiledClause {
    field: String,
    op: Comparator,
    operand: Operand,
}

#[derive(Debug, Clone)]
pub struct CompiledPredicate {
    clauses: Vec<CompiledClause>,
}

impl CompiledPredicate {
    pub fn matches(&self, record: &Record) -> bool {
        self.clauses.iter().all(|c| c.matches(record.get(&c.field)))
    }
}

impl CompiledClause {
    fn matches(&self, v: &Value) -> bool {
        match self.op {
            Comparator::IsNull => return v.is_null(),
            Comparator::IsNotNull => return !v.is_null(),
            _ if v.is_null() => return false,
            _ => {}
        }
        match (&self.op, &self.operand) {
            (Comparator::Eq, Operand::One(x)) => v == x,
            (Comparator::Neq, Operand::One(x)) => v != x,
            (Comparator::Lt, Operand::One(x)) => v < x,
            (Comparator::Lte, Operand::One(x)) => v <= x,
            (Comparator::Gt, Operand::One(x)) => v > x,
            (Comparator::Gte, Operand::One(x)) => v >= x,
            (Comparator::Contains, Operand::Text(s)) => match v {
                Value::Text(t) => t.contains(s.as_str()),
                Value::TextList(l) => l.iter().any(|e| e == s),
                _ => false,
            },
            (Comparator::InSet, Operand::Set(set)) => set.binary_search(v).is_ok(),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Field;
    use serde_json::json;

    fn schema() -> Schema {
        Schema::new(vec![
            Field::new("status", FieldType::Text),
            Field::nullable("n", FieldType::Integer),
            Field::new("tags", FieldType::TextList),
            Field::new("doc", FieldType::Structured),
        ])
        .unwrap()
    }

    fn rec(status: &str, n: Option<i64>) -> Record {
        Record::new("r")
            .with("status", status)
            .with("n", n.map(Value::Integer).unwrap_or(Value::Null))
            .with("tags", Value::TextList(vec!["a".into(), "b".into()]))
            .with("doc", Value::Structured(json!({"k": 1})))
    }

    #[test]
    fn conjunction_of_clauses() {
        let p: Predicate = serde_json::from_value(json!([
            {"field": "status", "op": "eq", "value": "ok"},
            {"field": "n", "op": "gte", "value": 3}
        ]))
        .unwrap();
        let c = p.compile(&schema()).unwrap();
        assert!(c.matches(&rec("ok", Some(3))));
        assert!(!c.matches(&rec("ok", Some(2))));
        assert!(!c.matches(&rec("bad", Some(9))));
        assert!(!c.matches(&rec("ok", None)));
    }

    #[test]
    fn nulls_only_match_is_null() {
        let s = schema();
        let isnull = Predicate::all().and(Clause::new("n", Comparator::IsNull, json!(null))).compile(&s).unwrap();
        let neq = Predicate::all().and(Clause::new("n", Comparator::Neq, json!(1))).compile(&s).unwrap();
        assert!(isnull.matches(&rec("x", None)));
        assert!(!neq.matches(&rec("x", None)));
    }

    #[test]
    fn contains_and_in_set() {
        let s = schema();
        let p = Predicate::all()
            .and(Clause::new("tags", Comparator::Contains, json!("b")))
            .and(Clause::new("status", Comparator::InSet, json!(["ok", "warn"])))
            .compile(&s)
            .unwrap();
        assert!(p.matches(&rec("warn", None)));
        assert!(!p.matches(&rec("err", None)));
    }

    #[test]
    fn type_checks_reject_bad_clauses() {
        let s = schema();
        let bad = [
            Clause::new("missing", Comparator::Eq, json!(1)),
            Clause::new("n", Comparator::Eq, json!("one")),
            Clause::new("doc", Comparator::Lt, json!({})),
            Clause::new("n", Comparator::Contains, json!("1")),
            Clause::new("status", Comparator::InSet, json!("ok")),
            Clause::new("status", Comparator::Eq, json!(null)),
        ];
        for clause in bad {
            assert!(Predicate::all().and(clause.clone()).compile(&s).is_err(), "{clause:?}");
        }
    }
}
