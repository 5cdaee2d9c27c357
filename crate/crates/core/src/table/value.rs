//! Typed values, schemas and records.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;

use super::TableError;

/// The admissible domain of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Text,
    Integer,
    Real,
    Boolean,
    BlobRef,
    Structured,
    TextList,
}

impl FieldType {
    pub fn name(self) -> &'static str {
        match self {
            FieldType::Text => "text",
            FieldType::Integer => "integer",
            FieldType::Real => "real",
            FieldType::Boolean => "boolean",
            FieldType::BlobRef => "blob_ref",
            FieldType::Structured => "structured",
            FieldType::TextList => "text_list",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, FieldType::Integer | FieldType::Real)
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single typed cell. `Null` is the explicit null marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Null,
    Text(String),
    Integer(i64),
    Real(f64),
    Boolean(bool),
    BlobRef(BlobRef),
    Structured(serde_json::Value),
    TextList(Vec<String>),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn field_type(&self) -> Option<FieldType> {
        Some(match self {
            Value::Null => return None,
            Value::Text(_) => FieldType::Text,
            Value::Integer(_) => FieldType::Integer,
            Value::Real(_) => FieldType::Real,
            Value::Boolean(_) => FieldType::Boolean,
            Value::BlobRef(_) => FieldType::BlobRef,
            Value::Structured(_) => FieldType::Structured,
            Value::TextList(_) => FieldType::TextList,
        })
    }

    pub fn conforms_to(&self, ty: FieldType) -> bool {
        match self {
            Value::Null => true,
            Value::Real(r) => ty == FieldType::Real && r.is_finite(),
            other => other.field_type() == Some(ty),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Boolean(_) => 1,
            Value::Integer(_) | Value::Real(_) => 2,
            Value::Text(_) => 3,
            Value::TextList(_) => 4,
            Value::BlobRef(_) => 5,
            Value::Structured(_) => 6,
        }
    }

    /// Plain JSON rendering used in tool results and worker prompts.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Value::Null => serde_json::Value::Null,
            Value::Text(s) => json!(s),
            Value::Integer(i) => json!(i),
            Value::Real(r) => json!(r),
            Value::Boolean(b) => json!(b),
            Value::BlobRef(r) => json!({"blob": r.id.to_hex(), "size": r.size, "media_hint": r.media_hint}),
            Value::Structured(v) => v.clone(),
            Value::TextList(l) => json!(l),
        }
    }

    /// Parse a plain JSON value as a value of type `ty`.
    pub fn from_json(ty: FieldType, json: &serde_json::Value) -> Result<Value, String> {
        use serde_json::Value as J;
        if json.is_null() {
            return Ok(Value::Null);
        }
        let mismatch = || format!("expected {ty}, found {json}");
        Ok(match ty {
            FieldType::Text => Value::Text(json.as_str().ok_or_else(mismatch)?.to_string()),
            FieldType::Integer => Value::Integer(json.as_i64().ok_or_else(mismatch)?),
            FieldType::Real => {
                let r = json.as_f64().ok_or_else(mismatch)?;
                if !r.is_finite() {
                    return Err(mismatch());
                }
                Value::Real(r)
            }
            FieldType::Boolean => Value::Boolean(json.as_bool().ok_or_else(mismatch)?),
            FieldType::BlobRef => {
                let obj = json.as_object().ok_or_else(mismatch)?;
                let id = obj.get("blob").and_then(J::as_str).ok_or_else(mismatch)?;
                let size = obj.get("size").and_then(J::as_u64).ok_or_else(mismatch)?;
                let hint = obj.get("media_hint").and_then(J::as_str).map(str::to_string);
                let id = id.parse().map_err(|_| mismatch())?;
                Value::BlobRef(BlobRef { id, size, media_hint: hint })
            }
            FieldType::Structured => Value::Structured(json.clone()),
            FieldType::TextList => {
                let arr = json.as_array().ok_or_else(mismatch)?;
                let mut out = Vec::with_capacity(arr.len());
                for item in arr {
                    out.push(item.as_str().ok_or_else(mismatch)?.to_string());
                }
                Value::TextList(out)
            }
        })
    }

    /// Human-readable text form used by casts, concat and collect.
    pub fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Text(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Real(r) => format!("{r:?}"),
            Value::Boolean(b) => b.to_string(),
            Value::BlobRef(r) => format!("blob:{}", r.id),
            Value::Structured(v) => v.to_string(),
            Value::TextList(l) => l.join(", "),
        }
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order: nulls first, then by type family, then by value. Integers
/// and reals compare numerically.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Null, Value::Null) => Ordering::Equal,
            (Value::Boolean(a), Value::Boolean(b)) => a.cmp(b),
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (Value::Real(a), Value::Real(b)) => a.total_cmp(b),
            (Value::Integer(a), Value::Real(b)) => (*a as f64).total_cmp(b).then(Ordering::Less),
            (Value::Real(a), Value::Integer(b)) => a.total_cmp(&(*b as f64)).then(Ordering::Greater),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::TextList(a), Value::TextList(b)) => a.cmp(b),
            (Value::BlobRef(a), Value::BlobRef(b)) => a.id.cmp(&b.id).then(a.size.cmp(&b.size)),
            (Value::Structured(a), Value::Structured(b)) => a.to_string().cmp(&b.to_string()),
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Integer(i)
    }
}

impl From<f64> for Value {
    fn from(r: f64) -> Self {
        Value::Real(r)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Boolean(b)
    }
}

impl From<BlobRef> for Value {
    fn from(r: BlobRef) -> Self {
        Value::BlobRef(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
    #[serde(default)]
    pub nullable: bool,
}

impl Field {
    pub fn new(name: impl Into<String>, ty: FieldType) -> Self {
        Field { name: name.into(), ty, nullable: false }
    }

    pub fn nullable(name: impl Into<String>, ty: FieldType) -> Self {
        Field { name: name.into(), ty, nullable: true }
    }
}

/// Ordered, uniquely named list of fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Field>", into = "Vec<Field>")]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Result<Schema, TableError> {
        let mut seen = BTreeSet::new();
        for f in &fields {
            if f.name.is_empty() {
                return Err(TableError::InvalidSchema("empty field name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(TableError::InvalidSchema(format!("duplicate field `{}`", f.name)));
            }
        }
        Ok(Schema { fields })
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Field, TableError> {
        self.field(name).ok_or_else(|| TableError::UnknownField(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    /// Order-insensitive (name, type) set.
    pub fn type_set(&self) -> BTreeSet<(String, FieldType)> {
        self.fields.iter().map(|f| (f.name.clone(), f.ty)).collect()
    }

    pub fn compatible_with(&self, other: &Schema) -> bool {
        self.type_set() == other.type_set()
    }

    /// Checks a record's values against this schema.
    pub fn check(&self, record: &Record) -> Result<(), TableError> {
        let violation = |field: &str, reason: String| TableError::SchemaViolation {
            row_id: record.id.to_string(),
            field: field.to_string(),
            reason,
        };
        for f in &self.fields {
            match record.values.get(&f.name) {
                None => return Err(violation(&f.name, "missing field".into())),
                Some(Value::Null) if !f.nullable => {
                    return Err(violation(&f.name, "null in non-nullable field".into()))
                }
                Some(v) if !v.conforms_to(f.ty) => {
                    return Err(violation(&f.name, format!("value does not conform to {}", f.ty)))
                }
                Some(_) => {}
            }
        }
        if record.values.len() != self.fields.len() {
            if let Some(extra) = record.values.keys().find(|k| self.field(k).is_none()) {
                return Err(violation(extra, "field not in schema".into()));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        self.fields
            .iter()
            .map(|f| format!("{}:{}{}", f.name, f.ty, if f.nullable { "?" } else { "" }))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Every problem found while validating a JSON object against a schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<FieldIssue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub reason: String,
}

impl ValidationReport {
    pub fn fields(&self) -> Vec<&str> {
        self.issues.iter().map(|i| i.field.as_str()).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .issues
            .iter()
            .map(|i| if i.field.is_empty() { i.reason.clone() } else { format!("`{}`: {}", i.field, i.reason) })
            .collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ValidationReport {}

impl Schema {
    /// Strictly validates a JSON object: every declared field must be present
    /// (nullable fields may be absent or null), every value must conform, and
    /// undeclared fields are rejected.
    pub fn validate_json(&self, json: &serde_json::Value) -> Result<BTreeMap<String, Value>, ValidationReport> {
        let issue = |field: &str, reason: String| FieldIssue { field: field.to_string(), reason };
        let Some(obj) = json.as_object() else {
            return Err(ValidationReport { issues: vec![issue("", format!("expected a JSON object, found {json}"))] });
        };
        let mut issues = Vec::new();
        let mut out = BTreeMap::new();
        for f in &self.fields {
            match obj.get(&f.name) {
                None if f.nullable => {
                    out.insert(f.name.clone(), Value::Null);
                }
                None => issues.push(issue(&f.name, "missing".into())),
                Some(j) => match Value::from_json(f.ty, j) {
                    Ok(Value::Null) if !f.nullable => issues.push(issue(&f.name, "null in non-nullable field".into())),
                    Ok(v) => {
                        out.insert(f.name.clone(), v);
                    }
                    Err(reason) => issues.push(issue(&f.name, reason)),
                },
            }
        }
        for k in obj.keys() {
            if self.field(k).is_none() {
                issues.push(issue(k, "undeclared field".into()));
            }
        }
        if issues.is_empty() {
            Ok(out)
        } else {
            Err(ValidationReport { issues })
        }
    }
}

impl TryFrom<Vec<Field>> for Schema {
    type Error = TableError;

    fn try_from(fields: Vec<Field>) -> Result<Self, Self::Error> {
        Schema::new(fields)
    }
}

impl From<Schema> for Vec<Field> {
    fn from(s: Schema) -> Self {
        s.fields
    }
}

/// Stable opaque row identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowId(pub String);

impl RowId {
    pub fn new(s: impl Into<String>) -> Self {
        RowId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: RowId,
    pub values: BTreeMap<String, Value>,
}

impl Record {
    pub fn new(id: impl Into<String>) -> Self {
        Record { id: RowId(id.into()), values: BTreeMap::new() }
    }

    pub fn with(mut self, field: impl Into<String>, value: impl Into<Value>) -> Self {
        self.values.insert(field.into(), value.into());
        self
    }

    pub fn get(&self, field: &str) -> &Value {
        static NULL: Value = Value::Null;
        self.values.get(field).unwrap_or(&NULL)
    }

    pub fn to_json(&self, columns: Option<&[String]>) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        obj.insert("_row_id".into(), serde_json::Value::String(self.id.0.clone()));
        for (k, v) in &self.values {
            if columns.is_none_or(|c| c.iter().any(|n| n == k)) {
                obj.insert(k.clone(), v.to_json());
            }
        }
        serde_json::Value::Object(obj)
    }
}
