//! Derives tables with filter, join and group, then evicts everything and
//! rebuilds the final table from lineage alone.

use std::sync::Arc;

use fanout::blob::BlobStore;
use fanout::table::{
    Aggregate, Clause, Comparator, Field, FieldType, GroupAggregation, JoinKey, Operator, Predicate, Record, Schema, TableStore,
};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let tables = TableStore::new(Arc::new(BlobStore::open(dir.path())?));

    let scenes = Schema::new(vec![Field::new("act", FieldType::Integer), Field::new("location", FieldType::Text)])?;
    let rows = [(1, "Verona"), (1, "Capulet house"), (2, "Capulet orchard"), (3, "Verona"), (5, "Tomb")];
    let recs = rows.iter().enumerate().map(|(i, (a, l))| Record::new(format!("s{i}")).with("act", *a as i64).with("location", *l)).collect();
    let scenes = tables.register_leaf("scenes", scenes, vec![], recs)?;

    let acts = Schema::new(vec![Field::new("act_no", FieldType::Integer), Field::new("title", FieldType::Text)])?;
    let recs = (1..=5).map(|a| Record::new(format!("a{a}")).with("act_no", a as i64).with("title", format!("Act {a}"))).collect();
    let acts = tables.register_leaf("acts", acts, vec![], recs)?;

    let early = tables.derive(Some("early"), Operator::Filter { predicate: Predicate::all().and(Clause::new("act", Comparator::Lte, json!(3))) }, std::slice::from_ref(&scenes.id))?;
    let joined = tables.derive(Some("joined"), Operator::Join { on: vec![JoinKey::new("act", "act_no")] }, &[early.id.clone(), acts.id.clone()])?;
    let grouped = tables.derive(
        Some("per_act"),
        Operator::Group {
            keys: vec!["title".into()],
            aggregations: vec![
                GroupAggregation { name: "scenes".into(), aggregate: Aggregate::Count, field: None },
                GroupAggregation { name: "places".into(), aggregate: Aggregate::Collect, field: Some("location".into()) },
            ],
        },
        std::slice::from_ref(&joined.id),
    )?;

    for r in &tables.data(&grouped.id)?.records {
        println!("{}", r.to_json(None));
    }
    println!("{}", serde_json::to_string_pretty(&tables.digest(&grouped.id, 2048)?)?);

    let before = tables.serialization(&grouped.id)?;
    for t in tables.list(true).iter() {
        tables.evict(&t.id)?;
    }
    let order: Vec<String> = tables.lineage().topo_order(&grouped.id).iter().map(|t| t.to_string()).collect();
    println!("lineage: {}", order.join(" -> "));
    tables.replay_lineage(&grouped.id)?;
    assert_eq!(tables.serialization(&grouped.id)?, before);
    println!("replayed {} identically", grouped.id);
    Ok(())
}
