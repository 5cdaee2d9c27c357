//! Stops a task after round 2, as if the process died, then reopens every
//! store from disk and resumes from the latest checkpoint.

use std::path::Path;

use fanout::manager::TaskOutcome;
use fanout::ops::cli::parse_schema;
use fanout::ops::{Runtime, RuntimeConfig};

fn open(root: &Path) -> Result<Runtime, Box<dyn std::error::Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/romeo_and_juliet");
    let mut cfg = RuntimeConfig::load(&fixture.join("fanout.toml"))?;
    cfg.root = root.to_path_buf();
    Ok(Runtime::open(cfg)?)
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/romeo_and_juliet");
    let dir = tempfile::tempdir()?;

    let task = {
        let rt = open(dir.path())?;
        let schema = parse_schema("scene_id:text,act:integer,scene:integer,location:text,text:text")?;
        rt.ingest(&fixture.join("scenes.csv"), "scenes", schema, Some("scene_id"))?;
        let sub = rt.submit(None, &std::fs::read_to_string(fixture.join("query.txt"))?, Some(2)).await?;
        println!("first process: {:?}", sub.outcome);
        sub.task_id
    };

    let rt = open(dir.path())?;
    let cp = rt.state().recover_latest_checkpoint(&task)?;
    println!("latest checkpoint: round {}", cp.round);
    let sub = rt.resume(&task, None).await?;
    match &sub.outcome {
        TaskOutcome::Finalized { rounds, report } => println!("second process: finalized after {rounds} rounds, tables {}", report["tables"]),
        other => println!("second process: {other:?}"),
    }

    let runs = rt.state().runs(&task, None, 1, 100)?;
    let mut per_batch = std::collections::BTreeMap::<String, usize>::new();
    for r in &runs.items {
        *per_batch.entry(r.batch_id.clone()).or_default() += r.attempts.len();
    }
    println!("attempts per batch: {per_batch:?}");
    Ok(())
}
