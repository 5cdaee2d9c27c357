#![allow(dead_code)]

pub mod algebra;
pub mod fabric;
pub mod scripted;

use std::collections::HashMap;
use std::sync::Arc;

use fanout::blob::{BlobError, BlobStore, ContentId};
use fanout::llm::{ChatRequest, Fixture, Gateway, Message, ModelGrade, Rate, RateTable, Reply, ScriptedBackend};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

/// A criterion's verdict with a one-line detail.
pub type Outcome = Result<String, String>;

/// Writes `n` random blobs, a share of them repeats, then corrupts every
/// stored object and reads it back.
pub fn content_addressing(n: usize, seed: u64) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = BlobStore::open(dir.path()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written: Vec<Vec<u8>> = Vec::new();
    let mut by_bytes: HashMap<Vec<u8>, ContentId> = HashMap::new();
    let mut by_id: HashMap<ContentId, Vec<u8>> = HashMap::new();
    for _ in 0..n {
        let bytes = if !written.is_empty() && rng.gen_bool(0.3) {
            written[rng.gen_range(0..written.len())].clone()
        } else {
            let len = rng.gen_range(0..96);
            (0..len).map(|_| rng.gen_range(0..4u8)).collect()
        };
        let r = store.put(&bytes).map_err(|e| e.to_string())?;
        let expected: [u8; 32] = Sha256::digest(&bytes).into();
        if r.id.as_bytes() != &expected {
            return Err(format!("id {} is not the SHA-256 of its bytes", r.id));
        }
        if let Some(prev) = by_bytes.get(&bytes) {
            if *prev != r.id {
                return Err(format!("equal bytes stored under {prev} and {}", r.id));
            }
        }
        if let Some(prev) = by_id.get(&r.id) {
            if *prev != bytes {
                return Err(format!("distinct bytes collide on {}", r.id));
            }
        }
        by_bytes.insert(bytes.clone(), r.id);
        by_id.insert(r.id, bytes.clone());
        written.push(bytes);
    }
    for (id, bytes) in &by_id {
        if &store.get_by_id(id).map_err(|e| e.to_string())? != bytes {
            return Err(format!("read of {id} returned other bytes"));
        }
    }
    for (id, bytes) in &by_id {
        let mut bad = bytes.clone();
        match bad.first_mut() {
            Some(b) => *b ^= 0x80,
            None => bad.push(0),
        }
        std::fs::write(store.path_of(id), &bad).map_err(|e| e.to_string())?;
        match store.get_by_id(id) {
            Err(BlobError::Integrity { .. }) => {}
            other => return Err(format!("corrupted {id} read as {other:?}")),
        }
    }
    Ok(format!("{n} writes, {} distinct ids, {} corruptions detected", by_id.len(), by_id.len()))
}

fn words(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

/// Token and cost totals per scope, checked against hand-computed sums.
pub fn usage_accounting() -> Outcome {
    let planner = Rate { input: 3e-6, output: 15e-6 };
    let worker = Rate { input: 2.5e-7, output: 1e-6 };
    let rates = RateTable([(ModelGrade::Planner, planner), (ModelGrade::Worker, worker)].into_iter().collect());
    let replies = ["one two three", "four five", "six"];
    let fixture: Fixture = serde_json::from_value(json!({"rules": [
        {"match": {"grade": "planner"}, "responses": [{"kind": "text", "text": replies[0]}]},
        {"match": {"contains": "short"}, "responses": [{"kind": "text", "text": replies[1]}]},
        {"responses": [{"kind": "text", "text": replies[2]}]}
    ]}))
    .map_err(|e| e.to_string())?;
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(fixture)), rates);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(|e| e.to_string())?;

    let calls: Vec<(ModelGrade, &str, &str, &[&str])> = vec![
        (ModelGrade::Planner, "plan the work", "alpha beta gamma delta", &["task"]),
        (ModelGrade::Worker, "be short", "a b c", &["task", "sub-1"]),
        (ModelGrade::Worker, "be brief", "x y", &["task", "sub-2"]),
        (ModelGrade::Worker, "be short", "p q r s t", &["task", "sub-2"]),
    ];
    let mut want: HashMap<&str, (u64, u64, f64, u64)> = HashMap::new();
    for (grade, system, user, scopes) in &calls {
        let mut req = ChatRequest::new(*grade, vec![Message::system(*system), Message::user(*user)]);
        for s in *scopes {
            req = req.with_scope(*s);
        }
        let resp = rt.block_on(gateway.complete(req)).map_err(|e| e.to_string())?;
        let Reply::Text { text } = &resp.reply else { return Err("expected a text reply".into()) };
        let (input, output) = (words(system) + words(user), words(text));
        let rate = if *grade == ModelGrade::Planner { planner } else { worker };
        for s in *scopes {
            let e = want.entry(s).or_default();
            e.0 += input;
            e.1 += output;
            e.2 += input as f64 * rate.input + output as f64 * rate.output;
            e.3 += 1;
        }
    }
    for (scope, (input, output, cost, n)) in &want {
        let r = gateway.usage_report(scope).map_err(|e| e.to_string())?;
        if (r.input_tokens, r.output_tokens, r.completions) != (*input, *output, *n) {
            return Err(format!("scope {scope}: tokens {}/{} in {} calls, expected {input}/{output} in {n}", r.input_tokens, r.output_tokens, r.completions));
        }
        if (r.cost - cost).abs() > 1e-12 {
            return Err(format!("scope {scope}: cost {} expected {cost}", r.cost));
        }
    }
    if gateway.usage_report("nobody").is_ok() {
        return Err("unknown scope reported usage".into());
    }
    let task = &want["task"];
    Ok(format!("{} scopes; task: {} in / {} out tokens, cost {:.8}", want.len(), task.0, task.1, task.2))
}
