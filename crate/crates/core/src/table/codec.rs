//! Canonical table serialization and leaf ingestion.
//!
//! The canonical format, version 1, is line oriented UTF-8:
//!
//! ```text
//! fanout-table/1
//! {"schema":[{"name":"scene_id","type":"text","nullable":false},...],"rows":26}
//! ["<row id>", <value for field 1>, <value for field 2>, ...]
//! ...
//! ```
//!
//! Rows appear in ascending row-id order and values in schema order. Values
//! are encoded as plain JSON except for two cases that would otherwise be
//! ambiguous: blob references are `{"blob":"<hex>","size":N,"media_hint":...}`
//! and structured values are wrapped as `{"json": <value>}`. Every line ends
//! with `\n`. Two tables with equal schemas and records serialize to equal
//! bytes.
//!
//! Ingestion reads delimited text (CSV with a header row) or line-delimited
//! JSON objects into records with an explicit schema.

use std::io::BufRead;

use serde_json::{json, Value as J};

use super::{FieldType, Record, RowId, Schema, TableData, TableError, Value};

pub const FORMAT_HEADER: &str = "fanout-table/1";

fn encode_value(v: &Value) -> J {
    match v {
        Value::Structured(j) => json!({ "json": j }),
        other => other.to_json(),
    }
}

fn decode_value(ty: FieldType, j: &J) -> Result<Value, TableError> {
    let j = match (ty, j) {
        (FieldType::Structured, J::Object(o)) if o.len() == 1 && o.contains_key("json") => &o["json"],
        (FieldType::Structured, J::Null) => return Ok(Value::Null),
        (FieldType::Structured, other) => return Err(TableError::Codec(format!("unwrapped structured value {other}"))),
        (_, j) => j,
    };
    Value::from_json(ty, j).map_err(TableError::Codec)
}

/// Serializes a table in canonical form. Records must already be sorted.
pub fn encode(data: &TableData) -> Vec<u8> {
    let mut out = String::with_capacity(64 + data.records.len() * 64);
    out.push_str(FORMAT_HEADER);
    out.push('\n');
    out.push_str(&json!({ "schema": data.schema, "rows": data.records.len() }).to_string());
    out.push('\n');
    for r in &data.records {
        let mut row = Vec::with_capacity(data.schema.len() + 1);
        row.push(J::String(r.id.0.clone()));
        for f in data.schema.fields() {
            row.push(encode_value(r.get(&f.name)));
        }
        out.push_str(&J::Array(row).to_string());
        out.push('\n');
    }
    out.into_bytes()
}

pub fn decode(bytes: &[u8]) -> Result<TableData, TableError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TableError::Codec(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_HEADER) {
        return Err(TableError::Codec("missing format header".into()));
    }
    let head: J = serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| TableError::Codec(e.to_string()))?;
    let schema: Schema = serde_json::from_value(head["schema"].clone()).map_err(|e| TableError::Codec(e.to_string()))?;
    let rows = head["rows"].as_u64().ok_or_else(|| TableError::Codec("missing row count".into()))? as usize;
    let mut records = Vec::with_capacity(rows);
    for line in lines {
        let cells: Vec<J> = serde_json::from_str(line).map_err(|e| TableError::Codec(e.to_string()))?;
        if cells.len() != schema.len() + 1 {
            return Err(TableError::Codec(format!("row has {} cells, expected {}", cells.len(), schema.len() + 1)));
        }
        let id = cells[0].as_str().ok_or_else(|| TableError::Codec("row id must be text".into()))?;
        let mut rec = Record::new(id);
        for (f, cell) in schema.fields().iter().zip(&cells[1..]) {
            rec.values.insert(f.name.clone(), decode_value(f.ty, cell)?);
        }
        records.push(rec);
    }
    if records.len() != rows {
        return Err(TableError::Codec(format!("header says {rows} rows, found {}", records.len())));
    }
    Ok(TableData { schema, records })
}

fn parse_cell(ty: FieldType, raw: &str, nullable: bool) -> Result<Value, String> {
    if raw.is_empty() && (nullable || ty != FieldType::Text) {
        return Ok(Value::Null);
    }
    let bad = || format!("`{raw}` is not a valid {ty}");
    Ok(match ty {
        FieldType::Text => Value::Text(raw.to_string()),
        FieldType::Integer => Value::Integer(raw.trim().parse().map_err(|_| bad())?),
        FieldType::Real => Value::Real(raw.trim().parse::<f64>().ok().filter(|r| r.is_finite()).ok_or_else(bad)?),
        FieldType::Boolean => Value::Boolean(raw.trim().parse().map_err(|_| bad())?),
        FieldType::BlobRef | FieldType::Structured | FieldType::TextList => {
            let j: J = serde_json::from_str(raw).map_err(|_| bad())?;
            Value::from_json(ty, &j)?
        }
    })
}

/// Reads CSV with a header row. The row id comes from `id_column` when given,
/// else from the 1-based line number zero-padded to six digits.
pub fn read_csv(reader: impl std::io::Read, schema: &Schema, id_column: Option<&str>) -> Result<Vec<Record>, TableError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| TableError::Codec(e.to_string()))?.clone();
    let mut positions = Vec::with_capacity(schema.len());
    for f in schema.fields() {
        let pos = headers
            .iter()
            .position(|h| h == f.name)
            .ok_or_else(|| TableError::Codec(format!("CSV header lacks column `{}`", f.name)))?;
        positions.push(pos);
    }
    let id_pos = id_column
        .map(|c| headers.iter().position(|h| h == c).ok_or_else(|| TableError::Codec(format!("CSV header lacks id column `{c}`"))))
        .transpose()?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| TableError::Codec(e.to_string()))?;
        let id = match id_pos {
            Some(p) => row.get(p).unwrap_or_default().to_string(),
            None => format!("{:06}", i + 1),
        };
        let mut rec = Record::new(id);
        for (f, &p) in schema.fields().iter().zip(&positions) {
            let v = parse_cell(f.ty, row.get(p).unwrap_or_default(), f.nullable).map_err(|reason| TableError::SchemaViolation {
                row_id: rec.id.to_string(),
                field: f.name.clone(),
                reason,
            })?;
            rec.values.insert(f.name.clone(), v);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads one JSON object per line. Blank lines are skipped. Missing keys read
/// as null, so non-nullable fields still fail schema checks at registration.
pub fn read_jsonl(reader: impl BufRead, schema: &Schema, id_column: Option<&str>) -> Result<Vec<Record>, TableError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TableError::Codec(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, J> =
            serde_json::from_str(&line).map_err(|e| TableError::Codec(format!("line {}: {e}", i + 1)))?;
        let id = match id_column {
            Some(c) => match obj.get(c) {
                Some(J::String(s)) => s.clone(),
                Some(J::Null) | None => return Err(TableError::Codec(format!("line {}: missing id column `{c}`", i + 1))),
                Some(other) => other.to_string(),
            },
            None => format!("{:06}", i + 1),
        };
        let mut rec = Record { id: RowId(id), values: Default::default() };
        for f in schema.fields() {
            let v = Value::from_json(f.ty, obj.get(&f.name).unwrap_or(&J::Null)).map_err(|reason| TableError::SchemaViolation {
                row_id: rec.id.to_string(),
                field: f.name.clone(),
                reason,
            })?;
            rec.values.insert(f.name.clone(), v);
        }
        out.push(rec);
    }
    Ok(out)
}
