//! The table catalog.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::blob::{BlobError, BlobRef, BlobStore};

use super::codec;
use super::digest::DEFAULT_SAMPLES;
use super::ops::Input;
use super::{TableDigest, LineageGraph, LineageNode, LineageOp, Operator, Record, Schema, TableError};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableId(String);

impl TableId {
    pub fn new(s: impl Into<String>) -> Self {
        TableId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Leaf,
    Derived,
    Results,
}

/// A table's schema and records, records in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct TableData {
    pub schema: Schema,
    pub records: Vec<Record>,
}

impl TableData {
    pub fn sorted(mut self) -> Self {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::encode(self)
    }

    fn validate(&self) -> Result<(), TableError> {
        for pair in self.records.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(TableError::DuplicateRowId(pair[0].id.to_string()));
            }
        }
        for r in &self.records {
            self.schema.check(r)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: TableId,
    pub name: String,
    pub kind: TableKind,
    pub schema: Schema,
    pub row_count: usize,
    pub lineage: LineageNode,
    pub archived: bool,
    /// Cached canonical serialization. `None` after eviction.
    pub materialization: Option<BlobRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TableListing {
    pub leaf: Vec<Table>,
    pub derived: Vec<Table>,
    pub results: Vec<Table>,
}

impl TableListing {
    pub fn len(&self) -> usize {
        self.leaf.len() + self.derived.len() + self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Table> {
        self.leaf.iter().chain(&self.derived).chain(&self.results)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Catalog {
    tables: BTreeMap<TableId, Table>,
    lineage: LineageGraph,
    next: u64,
}

impl Catalog {
    fn live_name_taken(&self, name: &str, except: Option<&TableId>) -> bool {
        self.tables.values().any(|t| !t.archived && t.name == name && Some(&t.id) != except)
    }

    fn get(&self, id: &TableId) -> Result<&Table, TableError> {
        self.tables.get(id).ok_or_else(|| TableError::UnknownTable(id.to_string()))
    }
}

pub struct TableStore {
    blobs: Arc<BlobStore>,
    catalog: RwLock<Catalog>,
    cache: Mutex<HashMap<TableId, Arc<TableData>>>,
}

impl TableStore {
    pub fn new(blobs: Arc<BlobStore>) -> Self {
        TableStore { blobs, catalog: RwLock::new(Catalog::default()), cache: Mutex::new(HashMap::new()) }
    }

    pub fn blobs(&self) -> &Arc<BlobStore> {
        &self.blobs
    }

    /// Registers a leaf table grounded in `sources`.
    pub fn register_leaf(
        &self,
        name: &str,
        schema: Schema,
        sources: Vec<BlobRef>,
        records: Vec<Record>,
    ) -> Result<Table, TableError> {
        let data = TableData { schema, records }.sorted();
        data.validate()?;
        let bytes = data.encode();
        let records = self.blobs.put_with_hint(&bytes, codec::FORMAT_HEADER)?;
        let node = LineageNode { op: LineageOp::Leaf { records: records.clone() }, dependencies: vec![], source_refs: sources };
        self.insert(Some(name), TableKind::Leaf, node, data, records)
    }

    /// Registers the results table of a batch. Rows come from worker outputs.
    pub fn register_results(
        &self,
        name: Option<&str>,
        batch_id: &str,
        schema: Schema,
        records: Vec<Record>,
    ) -> Result<Table, TableError> {
        let data = TableData { schema, records }.sorted();
        data.validate()?;
        let bytes = data.encode();
        let records = self.blobs.put_with_hint(&bytes, codec::FORMAT_HEADER)?;
        let node = LineageNode {
            op: LineageOp::BatchResults { batch_id: batch_id.to_string(), records: records.clone() },
            dependencies: vec![],
            source_refs: vec![],
        };
        self.insert(name, TableKind::Results, node, data, records)
    }

    /// Applies `op` to `deps` and registers the output as a derived table.
    pub fn derive(&self, name: Option<&str>, op: Operator, deps: &[TableId]) -> Result<Table, TableError> {
        let inputs = deps.iter().map(|d| self.data(d)).collect::<Result<Vec<_>, _>>()?;
        let data = {
            let ins: Vec<Input<'_>> = deps.iter().zip(&inputs).map(|(id, d)| Input { id, data: d }).collect();
            op.apply(&ins)?
        };
        data.validate()?;
        let bytes = data.encode();
        let records = self.blobs.put_with_hint(&bytes, codec::FORMAT_HEADER)?;
        let node = LineageNode { op: LineageOp::Derive { operator: op }, dependencies: deps.to_vec(), source_refs: vec![] };
        self.insert(name, TableKind::Derived, node, data, records)
    }

    fn insert(
        &self,
        name: Option<&str>,
        kind: TableKind,
        lineage: LineageNode,
        data: TableData,
        materialization: BlobRef,
    ) -> Result<Table, TableError> {
        let mut cat = self.catalog.write().unwrap();
        let id = TableId(format!("t{:04}", cat.next + 1));
        let name = match name {
            Some(n) if n.trim().is_empty() => return Err(TableError::InvalidParams("display name must not be empty".into())),
            Some(n) => n.to_string(),
            None => format!("{}_{}", lineage.operator_name(), id),
        };
        if cat.live_name_taken(&name, None) {
            return Err(TableError::NameCollision(name));
        }
        cat.lineage.insert(id.clone(), lineage.clone())?;
        cat.next += 1;
        let table = Table {
            id: id.clone(),
            name,
            kind,
            schema: data.schema.clone(),
            row_count: data.records.len(),
            lineage,
            archived: false,
            materialization: Some(materialization),
        };
        cat.tables.insert(id.clone(), table.clone());
        self.cache.lock().unwrap().insert(id, Arc::new(data));
        Ok(table)
    }

    pub fn get(&self, id: &TableId) -> Result<Table, TableError> {
        self.catalog.read().unwrap().get(id).cloned()
    }

    /// Looks a table up by id, or by the display name of a live table.
    pub fn resolve(&self, id_or_name: &str) -> Result<Table, TableError> {
        let cat = self.catalog.read().unwrap();
        if let Some(t) = cat.tables.get(&TableId::new(id_or_name)) {
            return Ok(t.clone());
        }
        cat.tables
            .values()
            .find(|t| !t.archived && t.name == id_or_name)
            .cloned()
            .ok_or_else(|| TableError::UnknownTable(id_or_name.to_string()))
    }

    /// The live table with this display name, if any.
    pub fn find_live(&self, name: &str) -> Option<Table> {
        self.catalog.read().unwrap().tables.values().find(|t| !t.archived && t.name == name).cloned()
    }

    pub fn lineage(&self) -> LineageGraph {
        self.catalog.read().unwrap().lineage.clone()
    }

    /// Materialized contents. Loads from the stored serialization on a cache
    /// miss and replays lineage if that is gone too.
    pub fn data(&self, id: &TableId) -> Result<Arc<TableData>, TableError> {
        if let Some(d) = self.cache.lock().unwrap().get(id) {
            return Ok(d.clone());
        }
        let table = self.get(id)?;
        let data = match table.materialization.as_ref().map(|m| self.blobs.get(m)) {
            Some(Ok(bytes)) => codec::decode(&bytes)?,
            Some(Err(BlobError::NotFound(_))) | None => {
                let data = self.replay_lineage(id)?;
                let m = self.blobs.put_with_hint(&data.encode(), codec::FORMAT_HEADER)?;
                if let Some(t) = self.catalog.write().unwrap().tables.get_mut(id) {
                    t.materialization = Some(m);
                }
                data
            }
            Some(Err(e)) => return Err(e.into()),
        };
        let data = Arc::new(data);
        self.cache.lock().unwrap().insert(id.clone(), data.clone());
        Ok(data)
    }

    pub fn digest(&self, id: &TableId, budget: usize) -> Result<TableDigest, TableError> {
        let table = self.get(id)?;
        TableDigest::build(&table, self.data(id)?.as_ref(), budget, DEFAULT_SAMPLES)
    }

    /// Canonical serialization of the table's current materialization.
    pub fn serialization(&self, id: &TableId) -> Result<Vec<u8>, TableError> {
        Ok(self.data(id)?.encode())
    }

    /// Drops the cached materialization, in memory and the catalog's
    /// reference to the stored copy. The next read replays lineage.
    pub fn evict(&self, id: &TableId) -> Result<(), TableError> {
        let mut cat = self.catalog.write().unwrap();
        let t = cat.tables.get_mut(id).ok_or_else(|| TableError::UnknownTable(id.to_string()))?;
        t.materialization = None;
        self.cache.lock().unwrap().remove(id);
        Ok(())
    }

    /// Rebuilds a table's records from its leaf ancestors, ignoring every
    /// cached materialization.
    pub fn replay_lineage(&self, id: &TableId) -> Result<TableData, TableError> {
        let graph = self.lineage();
        if graph.get(id).is_none() {
            return Err(TableError::UnknownTable(id.to_string()));
        }
        let mut built: BTreeMap<TableId, TableData> = BTreeMap::new();
        for t in graph.topo_order(id) {
            let node = graph.get(&t).ok_or_else(|| TableError::UnknownTable(t.to_string()))?;
            let data = match &node.op {
                LineageOp::Leaf { records } | LineageOp::BatchResults { records, .. } => {
                    let unrecoverable = |blob: &BlobRef| TableError::UnrecoverableLineage { table: t.to_string(), blob: blob.id };
                    for src in &node.source_refs {
                        if !self.blobs.contains(&src.id) {
                            return Err(unrecoverable(src));
                        }
                    }
                    let bytes = self.blobs.get(records).map_err(|_| unrecoverable(records))?;
                    codec::decode(&bytes)?
                }
                LineageOp::Derive { operator } => {
                    let ins: Vec<Input<'_>> = node.dependencies.iter().map(|d| Input { id: d, data: &built[d] }).collect();
                    operator.apply(&ins)?
                }
            };
            built.insert(t, data);
        }
        Ok(built.remove(id).expect("topological order ends with the target"))
    }

    pub fn rename(&self, id: &TableId, new_name: &str) -> Result<Table, TableError> {
        if new_name.trim().is_empty() {
            return Err(TableError::InvalidParams("display name must not be empty".into()));
        }
        let mut cat = self.catalog.write().unwrap();
        cat.get(id)?;
        if cat.live_name_taken(new_name, Some(id)) {
            return Err(TableError::NameCollision(new_name.to_string()));
        }
        let t = cat.tables.get_mut(id).unwrap();
        t.name = new_name.to_string();
        Ok(t.clone())
    }

    pub fn archive(&self, id: &TableId) -> Result<Table, TableError> {
        let mut cat = self.catalog.write().unwrap();
        let t = cat.tables.get_mut(id).ok_or_else(|| TableError::UnknownTable(id.to_string()))?;
        t.archived = true;
        Ok(t.clone())
    }

    pub fn unarchive(&self, id: &TableId) -> Result<Table, TableError> {
        let mut cat = self.catalog.write().unwrap();
        let t = cat.get(id)?;
        if !t.archived {
            return Err(TableError::NotArchived(id.to_string()));
        }
        let name = t.name.clone();
        if cat.live_name_taken(&name, Some(id)) {
            return Err(TableError::NameCollision(name));
        }
        let t = cat.tables.get_mut(id).unwrap();
        t.archived = false;
        Ok(t.clone())
    }

    /// Tables grouped by kind, in id order.
    pub fn list(&self, include_archived: bool) -> TableListing {
        let cat = self.catalog.read().unwrap();
        let mut out = TableListing::default();
        for t in cat.tables.values().filter(|t| include_archived || !t.archived) {
            match t.kind {
                TableKind::Leaf => out.leaf.push(t.clone()),
                TableKind::Derived => out.derived.push(t.clone()),
                TableKind::Results => out.results.push(t.clone()),
            }
        }
        out
    }

    pub fn ids(&self) -> BTreeSet<TableId> {
        self.catalog.read().unwrap().tables.keys().cloned().collect()
    }

    /// Persists the catalog to blob storage. Table contents are already
    /// there; only metadata is written.
    pub fn snapshot(&self) -> Result<BlobRef, TableError> {
        let bytes = serde_json::to_vec(&*self.catalog.read().unwrap()).map_err(|e| TableError::Codec(e.to_string()))?;
        Ok(self.blobs.put_with_hint(&bytes, "application/x-fanout-catalog")?)
    }

    pub fn restore(blobs: Arc<BlobStore>, snapshot: &BlobRef) -> Result<TableStore, TableError> {
        let bytes = blobs.get(snapshot)?;
        let catalog: Catalog = serde_json::from_slice(&bytes).map_err(|e| TableError::Codec(e.to_string()))?;
        Ok(TableStore { blobs, catalog: RwLock::new(catalog), cache: Mutex::new(HashMap::new()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{Clause, Comparator, Field, FieldType, Predicate, Value};
    use serde_json::json;

    fn store() -> (tempfile::TempDir, TableStore) {
        let dir = tempfile::tempdir().unwrap();
        let blobs = Arc::new(BlobStore::open(dir.path()).unwrap());
        (dir, TableStore::new(blobs))
    }

    fn scene_schema() -> Schema {
        Schema::new(vec![
            Field::new("scene_id", FieldType::Text),
            Field::new("act", FieldType::Text),
            Field::new("status", FieldType::Text),
        ])
        .unwrap()
    }

    fn scenes(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| {
                Record::new(format!("r{i:03}"))
                    .with("scene_id", format!("{}.{}", i / 5 + 1, i % 5))
                    .with("act", format!("act{}", i / 5 + 1))
                    .with("status", if i % 3 == 0 { "ok" } else { "pending" })
            })
            .collect()
    }

    #[test]
    fn leaf_registration_and_violations() {
        let (_d, s) = store();
        let src = s.blobs().put(b"source file").unwrap();
        let t = s.register_leaf("scenes", scene_schema(), vec![src], scenes(26)).unwrap();
        assert_eq!((t.kind, t.row_count), (TableKind::Leaf, 26));
        assert!(t.lineage.is_leaf());

        let empty = s.register_leaf("empty", scene_schema(), vec![], vec![]).unwrap();
        assert_eq!(empty.row_count, 0);

        let bad = vec![Record::new("x").with("scene_id", "1").with("status", "ok")];
        match s.register_leaf("bad", scene_schema(), vec![], bad).unwrap_err() {
            TableError::SchemaViolation { row_id, field, .. } => assert_eq!((row_id.as_str(), field.as_str()), ("x", "act")),
            e => panic!("unexpected {e}"),
        }
        let dup = vec![scenes(1)[0].clone(), scenes(1)[0].clone()];
        assert!(matches!(s.register_leaf("dup", scene_schema(), vec![], dup), Err(TableError::DuplicateRowId(_))));
    }

    #[test]
    fn filter_twice_is_byte_identical_and_pure() {
        let (_d, s) = store();
        let t = s.register_leaf("scenes", scene_schema(), vec![], scenes(12)).unwrap();
        let before = s.serialization(&t.id).unwrap();
        let op = Operator::Filter { predicate: Predicate::all().and(Clause::new("status", Comparator::Eq, json!("ok"))) };
        let a = s.derive(None, op.clone(), std::slice::from_ref(&t.id)).unwrap();
        let b = s.derive(None, op, std::slice::from_ref(&t.id)).unwrap();
        assert_eq!(s.serialization(&a.id).unwrap(), s.serialization(&b.id).unwrap());
        assert_eq!(s.serialization(&t.id).unwrap(), before);
        assert_eq!(a.row_count, 4);
    }

    #[test]
    fn replay_after_eviction_and_missing_source() {
        let (_d, s) = store();
        let src = s.blobs().put(b"raw").unwrap();
        let t = s.register_leaf("scenes", scene_schema(), vec![src.clone()], scenes(20)).unwrap();
        let u = s.derive(None, Operator::Union, &[t.id.clone(), t.id.clone()]).unwrap();
        let p = s.derive(None, Operator::Project { columns: vec!["act".into(), "status".into()] }, std::slice::from_ref(&u.id)).unwrap();
        let f = s
            .derive(None, Operator::Filter { predicate: Predicate::all().and(Clause::new("status", Comparator::Neq, json!("ok"))) }, std::slice::from_ref(&p.id))
            .unwrap();
        let snapshot = s.serialization(&f.id).unwrap();
        for id in [&t.id, &u.id, &p.id, &f.id] {
            s.evict(id).unwrap();
        }
        assert_eq!(s.replay_lineage(&f.id).unwrap().encode(), snapshot);
        assert_eq!(s.serialization(&f.id).unwrap(), snapshot);
        assert_eq!(s.replay_lineage(&t.id).unwrap().records, scenes(20));

        std::fs::remove_file(s.blobs().path_of(&src.id)).unwrap();
        match s.replay_lineage(&f.id).unwrap_err() {
            TableError::UnrecoverableLineage { blob, .. } => assert_eq!(blob, src.id),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn namespace_operations() {
        let (_d, s) = store();
        let a = s.register_leaf("a", scene_schema(), vec![], scenes(3)).unwrap();
        let b = s.register_leaf("b", scene_schema(), vec![], scenes(3)).unwrap();
        assert!(matches!(s.rename(&b.id, "a"), Err(TableError::NameCollision(_))));
        s.archive(&a.id).unwrap();
        assert!(s.list(false).iter().all(|t| t.id != a.id));
        assert!(s.list(true).iter().any(|t| t.id == a.id));
        let d = s.derive(Some("from_archived"), Operator::Union, std::slice::from_ref(&a.id)).unwrap();
        assert_eq!(d.lineage.dependencies, vec![a.id.clone()]);
        assert!(matches!(s.unarchive(&b.id), Err(TableError::NotArchived(_))));
        s.rename(&b.id, "a").unwrap();
        assert!(matches!(s.unarchive(&a.id), Err(TableError::NameCollision(_))));
        assert_eq!(s.resolve("a").unwrap().id, b.id);
        assert!(matches!(s.rename(&TableId::new("t9999"), "z"), Err(TableError::UnknownTable(_))));
    }

    #[test]
    fn snapshot_restore_preserves_catalog() {
        let (_d, s) = store();
        let t = s.register_leaf("scenes", scene_schema(), vec![], scenes(5)).unwrap();
        let g = s.derive(Some("by_act"), Operator::Project { columns: vec!["act".into()] }, std::slice::from_ref(&t.id)).unwrap();
        let snap = s.snapshot().unwrap();
        let r = TableStore::restore(s.blobs().clone(), &snap).unwrap();
        assert_eq!(r.get(&g.id).unwrap(), g);
        assert_eq!(r.serialization(&g.id).unwrap(), s.serialization(&g.id).unwrap());
        let next = r.register_leaf("more", scene_schema(), vec![], vec![]).unwrap();
        assert_eq!(next.id.as_str(), "t0003");
        assert_eq!(r.data(&t.id).unwrap().records[0].get("act"), &Value::from("act1"));
    }
}
