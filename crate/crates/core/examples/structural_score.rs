//! Scores a finished task against its benchmark contract, then against a
//! contract that expects a table the run never produced.

use std::path::Path;

use fanout::ops::cli::parse_schema;
use fanout::ops::{structural_score, BenchmarkContract, Runtime, RuntimeConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/romeo_and_juliet");
    let dir = tempfile::tempdir()?;
    let mut cfg = RuntimeConfig::load(&fixture.join("fanout.toml"))?;
    cfg.root = dir.path().join("run");
    let rt = Runtime::open(cfg)?;
    let schema = parse_schema("scene_id:text,act:integer,scene:integer,location:text,text:text")?;
    rt.ingest(&fixture.join("scenes.csv"), "scenes", schema, Some("scene_id"))?;
    let sub = rt.submit(None, &std::fs::read_to_string(fixture.join("query.txt"))?, None).await?;
    let tables = rt.task_tables(&sub.task_id)?;

    let contract = BenchmarkContract::load(&fixture.join("contract.toml"))?;
    let score = structural_score(&tables, &contract);
    println!("contract as shipped: {}/{} checks, score {}", score.passed, score.total, score.score);

    let renamed = std::fs::read_to_string(fixture.join("contract.toml"))?.replace("\"act_summaries\"", "\"act_rollups\"");
    let path = dir.path().join("renamed.toml");
    std::fs::write(&path, renamed)?;
    let score = structural_score(&tables, &BenchmarkContract::load(&path)?);
    println!("with a missing table: {}/{} checks, score {:.3}", score.passed, score.total, score.score);
    for c in score.checks.iter().filter(|c| !c.passed) {
        println!("  failed {} {:?}: {}", c.tier, c.kind, c.detail.as_deref().unwrap_or(""));
    }

    let usage = rt.task_usage(&sub.task_id)?;
    println!("usage: {} completions, {} in / {} out tokens", usage.completions, usage.input_tokens, usage.output_tokens);
    Ok(())
}
