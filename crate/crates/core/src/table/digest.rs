//! Compact, size-bounded table metadata for prompts.
//!
//! A digest always carries the table id, name, kind, full schema, exact row
//! count and per-field null counts. Sample values are then added round-robin
//! across fields (first sample of every field, then second, ...) while the
//! serialized digest stays within the byte budget. Samples are the first
//! distinct non-null values in canonical row order, each cut to
//! [`SAMPLE_CHARS`] characters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Table, TableData, TableError, TableKind};

/// Smallest accepted byte budget.
pub const DIGEST_MIN_BUDGET: usize = 256;
pub const SAMPLE_CHARS: usize = 48;
pub const DEFAULT_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDigest {
    pub id: String,
    pub name: String,
    pub kind: TableKind,
    pub schema: Vec<String>,
    pub rows: usize,
    pub nulls: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub samples: BTreeMap<String, Vec<String>>,
}

fn cut(s: String) -> String {
    if s.chars().count() <= SAMPLE_CHARS {
        return s;
    }
    let mut out: String = s.chars().take(SAMPLE_CHARS - 1).collect();
    out.push('…');
    out
}

impl TableDigest {
    pub fn build(table: &Table, data: &TableData, budget: usize, k: usize) -> Result<TableDigest, TableError> {
        let too_small = || TableError::BudgetTooSmall { budget, minimum: DIGEST_MIN_BUDGET };
        if budget < DIGEST_MIN_BUDGET {
            return Err(too_small());
        }
        let fields = data.schema.fields();
        let mut nulls: BTreeMap<String, u64> = fields.iter().map(|f| (f.name.clone(), 0)).collect();
        let mut candidates: Vec<Vec<String>> = vec![Vec::new(); fields.len()];
        for r in &data.records {
            for (i, f) in fields.iter().enumerate() {
                let v = r.get(&f.name);
                if v.is_null() {
                    *nulls.get_mut(&f.name).unwrap() += 1;
                } else if candidates[i].len() < k {
                    let s = cut(v.render());
                    if !candidates[i].contains(&s) {
                        candidates[i].push(s);
                    }
                }
            }
        }
        let mut digest = TableDigest {
            id: table.id.to_string(),
            name: table.name.clone(),
            kind: table.kind,
            schema: data.schema.summary().split(", ").filter(|s| !s.is_empty()).map(str::to_string).collect(),
            rows: data.records.len(),
            nulls,
            samples: BTreeMap::new(),
        };
        let mut size = digest.to_bytes().len();
        if size > budget {
            return Err(too_small());
        }
        'fill: for round in 0..k {
            for (i, f) in fields.iter().enumerate() {
                let Some(s) = candidates[i].get(round) else { continue };
                let entry = digest.samples.entry(f.name.clone()).or_default();
                entry.push(s.clone());
                let next = digest.to_bytes().len();
                if next > budget {
                    let entry = digest.samples.get_mut(&f.name).unwrap();
                    entry.pop();
                    if entry.is_empty() {
                        digest.samples.remove(&f.name);
                    }
                    break 'fill;
                }
                size = next;
            }
        }
        debug_assert!(size <= budget);
        Ok(digest)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("digest serializes")
    }
}
