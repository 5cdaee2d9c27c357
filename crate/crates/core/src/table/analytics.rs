//! Read-only queries over a materialized table.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FieldType, Predicate, Record, TableData, TableError, Value};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Page {
    pub page: usize,
    pub page_size: usize,
    pub total_rows: usize,
    pub total_pages: usize,
    pub rows: Vec<Record>,
}

fn paginate(rows: Vec<&Record>, page: usize, page_size: usize) -> Result<Page, TableError> {
    if page == 0 || page_size == 0 {
        return Err(TableError::InvalidParams("page and page_size are 1-based and positive".into()));
    }
    let total_rows = rows.len();
    let start = (page - 1).saturating_mul(page_size).min(total_rows);
    let end = start.saturating_add(page_size).min(total_rows);
    Ok(Page {
        page,
        page_size,
        total_rows,
        total_pages: total_rows.div_ceil(page_size),
        rows: rows[start..end].iter().map(|r| (*r).clone()).collect(),
    })
}

pub fn preview_rows(data: &TableData, page: usize, page_size: usize) -> Result<Page, TableError> {
    paginate(data.records.iter().collect(), page, page_size)
}

pub fn get_row(data: &TableData, row_id: &str) -> Result<Record, TableError> {
    data.records
        .binary_search_by(|r| r.id.as_str().cmp(row_id))
        .map(|i| data.records[i].clone())
        .map_err(|_| TableError::UnknownRow(row_id.to_string()))
}

pub fn filter_rows(data: &TableData, predicate: &Predicate, page: usize, page_size: usize) -> Result<Page, TableError> {
    let p = predicate.compile(&data.schema)?;
    paginate(data.records.iter().filter(|r| p.matches(r)).collect(), page, page_size)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distinct {
    pub values: Vec<Value>,
    pub total_distinct: usize,
}

/// Distinct non-null values in ascending order, truncated to `limit`.
pub fn distinct_values(data: &TableData, field: &str, limit: usize) -> Result<Distinct, TableError> {
    data.schema.require(field)?;
    let set: BTreeSet<&Value> = data.records.iter().map(|r| r.get(field)).filter(|v| !v.is_null()).collect();
    Ok(Distinct { total_distinct: set.len(), values: set.into_iter().take(limit).cloned().collect() })
}

/// Top-`k` (value, count) pairs by count descending, ties by value ascending.
/// Nulls are counted as a value of their own.
pub fn value_counts(data: &TableData, field: &str, k: usize) -> Result<Vec<(Value, u64)>, TableError> {
    data.schema.require(field)?;
    let mut counts: BTreeMap<&Value, u64> = BTreeMap::new();
    for r in &data.records {
        *counts.entry(r.get(field)).or_default() += 1;
    }
    let mut out: Vec<(Value, u64)> = counts.into_iter().map(|(v, c)| (v.clone(), c)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumericSummary {
    pub field: String,
    pub count: u64,
    pub nulls: u64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub stddev: Option<f64>,
}

pub fn summarize_numeric(data: &TableData, fields: &[String]) -> Result<Vec<NumericSummary>, TableError> {
    let mut out = Vec::with_capacity(fields.len());
    for f in fields {
        let field = data.schema.require(f)?;
        if !field.ty.is_numeric() {
            return Err(TableError::TypeMismatch { field: f.clone(), reason: format!("{} is not numeric", field.ty) });
        }
        let (mut n, mut nulls, mut mean, mut m2) = (0u64, 0u64, 0f64, 0f64);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in &data.records {
            let Some(x) = r.get(f).as_f64() else {
                nulls += 1;
                continue;
            };
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
            min = min.min(x);
            max = max.max(x);
        }
        let some = |v: f64| (n > 0).then_some(v);
        out.push(NumericSummary {
            field: f.clone(),
            count: n,
            nulls,
            min: some(min),
            max: some(max),
            mean: some(mean),
            stddev: some(if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 }),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateFn {
    Count,
    CountDistinct,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub name: String,
    #[serde(rename = "fn")]
    pub func: AggregateFn,
    #[serde(default)]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub key: Vec<Value>,
    pub values: BTreeMap<String, Value>,
}

/// Ad-hoc grouped aggregation. Unlike the `group` operator this creates no
/// table. Groups come back in ascending key order.
pub fn groupby_aggregate(data: &TableData, keys: &[String], aggs: &[AggregateSpec]) -> Result<Vec<GroupRow>, TableError> {
    for k in keys {
        data.schema.require(k)?;
    }
    for a in aggs {
        match (&a.field, a.func) {
            (None, AggregateFn::Count) => {}
            (None, _) => return Err(TableError::InvalidParams(format!("aggregate `{}` needs a field", a.name))),
            (Some(f), func) => {
                let field = data.schema.require(f)?;
                let numeric = matches!(func, AggregateFn::Sum | AggregateFn::Avg);
                if numeric && !field.ty.is_numeric() {
                    return Err(TableError::TypeMismatch { field: f.clone(), reason: format!("{func:?} needs a numeric field") });
                }
            }
        }
    }
    let mut groups: BTreeMap<Vec<&Value>, Vec<&Record>> = BTreeMap::new();
    for r in &data.records {
        groups.entry(keys.iter().map(|k| r.get(k)).collect()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, rows) in groups {
        let mut values = BTreeMap::new();
        for a in aggs {
            let cells: Vec<&Value> = match &a.field {
                Some(f) => rows.iter().map(|r| r.get(f)).filter(|v| !v.is_null()).collect(),
                None => vec![],
            };
            let v = match a.func {
                AggregateFn::Count if a.field.is_none() => Value::Integer(rows.len() as i64),
                AggregateFn::Count => Value::Integer(cells.len() as i64),
                AggregateFn::CountDistinct => Value::Integer(cells.iter().collect::<BTreeSet<_>>().len() as i64),
                AggregateFn::Sum => sum(&cells, a.field.as_deref().and_then(|f| data.schema.field(f)).map(|f| f.ty)),
                AggregateFn::Avg if cells.is_empty() => Value::Null,
                AggregateFn::Avg => Value::Real(cells.iter().filter_map(|v| v.as_f64()).sum::<f64>() / cells.len() as f64),
                AggregateFn::Min => cells.iter().min().map(|v| (*v).clone()).unwrap_or(Value::Null),
                AggregateFn::Max => cells.iter().max().map(|v| (*v).clone()).unwrap_or(Value::Null),
            };
            values.insert(a.name.clone(), v);
        }
        out.push(GroupRow { key: key.into_iter().cloned().collect(), values });
    }
    Ok(out)
}

fn sum(cells: &[&Value], ty: Option<FieldType>) -> Value {
    if ty == Some(FieldType::Integer) {
        let total = cells.iter().try_fold(0i64, |acc, v| match v {
            Value::Integer(i) => acc.checked_add(*i),
            _ => Some(acc),
        });
        if let Some(t) = total {
            return Value::Integer(t);
        }
    }
    Value::Real(cells.iter().filter_map(|v| v.as_f64()).sum())
}

/// Uniform sample without replacement, returned in canonical order. The same
/// seed over the same table yields the same rows.
pub fn sample_rows(data: &TableData, n: usize, seed: Option<u64>) -> Vec<Record> {
    let n = n.min(data.records.len());
    let mut rng = match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_entropy(),
    };
    let mut picked = index::sample(&mut rng, data.records.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| data.records[i].clone()).collect()
}
