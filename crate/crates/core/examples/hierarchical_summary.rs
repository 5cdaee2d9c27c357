//! Runs the bundled Romeo and Juliet fixture end to end: ingest 26 scenes,
//! let the scripted manager fan out scene, act and play summaries, then
//! print the tables it leaves behind.

use std::path::Path;

use fanout::ops::cli::parse_schema;
use fanout::ops::{Runtime, RuntimeConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/romeo_and_juliet");
    let dir = tempfile::tempdir()?;
    let mut cfg = RuntimeConfig::load(&fixture.join("fanout.toml"))?;
    cfg.root = dir.path().to_path_buf();
    let rt = Runtime::open(cfg)?;

    let schema = parse_schema("scene_id:text,act:integer,scene:integer,location:text,text:text")?;
    let scenes = rt.ingest(&fixture.join("scenes.csv"), "scenes", schema, Some("scene_id"))?;
    println!("ingested {} scenes", scenes.row_count);

    let query = std::fs::read_to_string(fixture.join("query.txt"))?;
    let sub = rt.submit(None, &query, None).await?;
    println!("{} -> {:?}", sub.task_id, sub.outcome);

    for e in rt.state().events(&sub.task_id, 0, usize::MAX)? {
        if matches!(e.kind.as_str(), "round_started" | "batch_started" | "batch_finished" | "gate") {
            println!("{:>4} {:<14} {}", e.seq, e.kind, e.payload);
        }
    }
    let tables = rt.task_tables(&sub.task_id)?;
    for t in tables.list(false).iter() {
        println!("{:<8} {:<20} {:>3} rows", t.id, t.name, t.row_count);
    }
    let play = tables.resolve("full_summary")?;
    for r in &tables.data(&play.id)?.records {
        println!("{}", r.to_json(None));
    }
    Ok(())
}
