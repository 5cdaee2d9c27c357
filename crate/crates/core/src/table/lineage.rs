//! Lineage DAG over tables.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;

use super::{Operator, TableError, TableId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineageOp {
    /// Leaf grounded in source blobs. `records` holds the canonical
    /// serialization as registered.
    Leaf { records: BlobRef },
    Derive { operator: Operator },
    /// A batch results table. Its rows come from worker outputs, so like a
    /// leaf it is grounded in a stored serialization.
    BatchResults { batch_id: String, records: BlobRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageNode {
    pub op: LineageOp,
    pub dependencies: Vec<TableId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_refs: Vec<BlobRef>,
}

impl LineageNode {
    pub fn operator_name(&self) -> &str {
        match &self.op {
            LineageOp::Leaf { .. } => "leaf",
            LineageOp::Derive { operator } => operator.name(),
            LineageOp::BatchResults { .. } => "batch_results",
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.dependencies.is_empty()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LineageGraph {
    nodes: BTreeMap<TableId, LineageNode>,
}

impl LineageGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &TableId) -> Option<&LineageNode> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether `to` is reachable from `from` following dependency edges.
    pub fn reaches(&self, from: &TableId, to: &TableId) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(id) = stack.pop() {
            if id == to {
                return true;
            }
            if !seen.insert(id) {
                continue;
            }
            if let Some(n) = self.nodes.get(id) {
                stack.extend(n.dependencies.iter());
            }
        }
        false
    }

    /// Inserts a node, rejecting edges that would close a cycle.
    pub fn insert(&mut self, id: TableId, node: LineageNode) -> Result<(), TableError> {
        for dep in &node.dependencies {
            if dep == &id || self.reaches(dep, &id) {
                return Err(TableError::Cycle(dep.to_string()));
            }
        }
        if self.nodes.contains_key(&id) {
            return Err(TableError::DuplicateNode(id.to_string()));
        }
        for dep in &node.dependencies {
            if !self.nodes.contains_key(dep) {
                return Err(TableError::UnknownTable(dep.to_string()));
            }
        }
        self.nodes.insert(id, node);
        Ok(())
    }

    /// Dependencies first, `id` last.
    pub fn topo_order(&self, id: &TableId) -> Vec<TableId> {
        fn visit(g: &LineageGraph, id: &TableId, seen: &mut BTreeSet<TableId>, out: &mut Vec<TableId>) {
            if !seen.insert(id.clone()) {
                return;
            }
            if let Some(n) = g.nodes.get(id) {
                for d in &n.dependencies {
                    visit(g, d, seen, out);
                }
            }
            out.push(id.clone());
        }
        let mut out = Vec::new();
        visit(self, id, &mut BTreeSet::new(), &mut out);
        out
    }

    /// Every leaf-level blob the table's lineage is grounded in.
    pub fn grounding_blobs(&self, id: &TableId) -> Vec<BlobRef> {
        let mut out = Vec::new();
        for t in self.topo_order(id) {
            let Some(n) = self.nodes.get(&t) else { continue };
            match &n.op {
                LineageOp::Leaf { records } | LineageOp::BatchResults { records, .. } => {
                    out.extend(n.source_refs.iter().cloned());
                    out.push(records.clone());
                }
                LineageOp::Derive { .. } => {}
            }
        }
        out
    }
}
