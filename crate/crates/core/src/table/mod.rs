//! Immutable, schema-typed, lineage-tracked data tables.
//!
//! A table is a read-only, finite sequence of records. New tables are built
//! from existing ones by a pure, deterministic operator algebra
//! ([`Operator`]); every derived table records the operator application that
//! produced it, so its records can be rebuilt from leaf sources at any time
//! ([`TableStore::replay_lineage`]).
//!
//! Records are always held in canonical order (ascending row id), which makes
//! every operator output, and its canonical serialization, a function of its
//! inputs alone.

pub mod analytics;
pub mod codec;
mod digest;
mod lineage;
mod ops;
mod predicate;
mod store;
mod value;

use thiserror::Error;

use crate::blob::{BlobError, ContentId};

pub use digest::{TableDigest, DIGEST_MIN_BUDGET};
pub use lineage::{LineageGraph, LineageNode, LineageOp};
pub use ops::{Aggregate, ComputeExpr, ComputedColumn, GroupAggregation, JoinKey, Operator, LINEAGE_COLUMNS};
pub use predicate::{Clause, Comparator, CompiledPredicate, Predicate};
pub use store::{Table, TableData, TableId, TableKind, TableListing, TableStore};
pub use value::{Field, FieldIssue, FieldType, Record, RowId, Schema, ValidationReport, Value};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema violation in row `{row_id}`, field `{field}`: {reason}")]
    SchemaViolation { row_id: String, field: String, reason: String },
    #[error("duplicate row id `{0}`")]
    DuplicateRowId(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown row `{0}`")]
    UnknownRow(String),
    #[error("type mismatch on field `{field}`: {reason}")]
    TypeMismatch { field: String, reason: String },
    #[error("incompatible schemas: {0}")]
    IncompatibleSchemas(String),
    #[error("missing join key: {0}")]
    MissingJoinKey(String),
    #[error("lineage edge from `{0}` would close a cycle")]
    Cycle(String),
    #[error("lineage node `{0}` already exists")]
    DuplicateNode(String),
    #[error("unrecoverable lineage for table `{table}`: blob {blob} is missing or corrupt")]
    UnrecoverableLineage { table: String, blob: ContentId },
    #[error("display name `{0}` is already in use")]
    NameCollision(String),
    #[error("table `{0}` is not archived")]
    NotArchived(String),
    #[error("digest budget {budget} bytes is below the minimum of {minimum}")]
    BudgetTooSmall { budget: usize, minimum: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("malformed table encoding: {0}")]
    Codec(String),
    #[error(transparent)]
    Blob(#[from] BlobError),
}
