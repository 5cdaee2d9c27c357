use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LlmError, ModelGrade, Usage};

/// Per-token prices for one model grade.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub input: f64,
    pub output: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateTable(pub BTreeMap<ModelGrade, Rate>);

impl RateTable {
    pub fn uniform(rate: Rate) -> Self {
        RateTable([ModelGrade::Planner, ModelGrade::Worker, ModelGrade::Nano].into_iter().map(|g| (g, rate)).collect())
    }

    pub fn rate(&self, grade: ModelGrade) -> Rate {
        self.0.get(&grade).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub scope: String,
    pub completions: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
}

#[derive(Debug, Default, Clone)]
struct ScopeTotals {
    completions: u64,
    by_grade: BTreeMap<ModelGrade, Usage>,
}

/// Token totals per scope. Scopes are opened explicitly or on first use.
#[derive(Debug, Default)]
pub struct UsageLedger {
    rates: RateTable,
    scopes: Mutex<BTreeMap<String, ScopeTotals>>,
}

impl UsageLedger {
    pub fn new(rates: RateTable) -> Self {
        UsageLedger { rates, scopes: Mutex::new(BTreeMap::new()) }
    }

    pub fn rates(&self) -> &RateTable {
        &self.rates
    }

    pub fn open_scope(&self, scope: &str) {
        self.scopes.lock().unwrap().entry(scope.to_string()).or_default();
    }

    pub fn record(&self, scopes: &[String], grade: ModelGrade, usage: Usage) {
        let mut all = self.scopes.lock().unwrap();
        for s in scopes {
            let t = all.entry(s.clone()).or_default();
            t.completions += 1;
            let g = t.by_grade.entry(grade).or_default();
            g.input_tokens += usage.input_tokens;
            g.output_tokens += usage.output_tokens;
        }
    }

    pub fn report(&self, scope: &str) -> Result<UsageReport, LlmError> {
        let all = self.scopes.lock().unwrap();
        let t = all.get(scope).ok_or_else(|| LlmError::UnknownScope(scope.to_string()))?;
        let mut r = UsageReport { scope: scope.to_string(), completions: t.completions, ..Default::default() };
        for (grade, u) in &t.by_grade {
            let rate = self.rates.rate(*grade);
            r.input_tokens += u.input_tokens;
            r.output_tokens += u.output_tokens;
            r.cost += u.input_tokens as f64 * rate.input + u.output_tokens as f64 * rate.output;
        }
        Ok(r)
    }
}
