//! Naive reference implementations of the table operators and the lineage
//! chain checks.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use fanout::blob::BlobStore;
use fanout::table::{
    Aggregate, Clause, Comparator, Field, FieldType, GroupAggregation, JoinKey, Operator, Predicate, Record, Schema, TableData,
    TableId, TableStore, Value,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as J};

use super::Outcome;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub k: Option<i64>,
    pub s: Option<String>,
    pub b: bool,
}

pub fn rows(max: usize) -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec((prop::option::of(-4i64..5), prop::option::of("[ab]{0,2}"), any::<bool>()), 0..=max)
        .prop_map(|v| v.into_iter().map(|(k, s, b)| Row { k, s, b }).collect())
}

fn opt_int(v: Option<i64>) -> Value {
    v.map_or(Value::Null, Value::Integer)
}

fn opt_text(v: &Option<String>) -> Value {
    v.clone().map_or(Value::Null, Value::Text)
}

/// Registers rows under columns `(k, s, b)` renamed by `names`.
pub fn register(tables: &TableStore, name: &str, names: [&str; 3], rows: &[Row]) -> TableId {
    let schema = Schema::new(vec![
        Field::nullable(names[0], FieldType::Integer),
        Field::nullable(names[1], FieldType::Text),
        Field::new(names[2], FieldType::Boolean),
    ])
    .unwrap();
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, r)| Record::new(format!("r{i:03}")).with(names[0], opt_int(r.k)).with(names[1], opt_text(&r.s)).with(names[2], r.b))
        .collect();
    tables.register_leaf(name, schema, vec![], records).unwrap().id
}

pub fn scratch() -> (tempfile::TempDir, TableStore) {
    let dir = tempfile::tempdir().unwrap();
    let tables = TableStore::new(Arc::new(BlobStore::open(dir.path()).unwrap()));
    (dir, tables)
}

type Canon = BTreeMap<String, J>;

fn canon_rows(rows: Vec<Canon>) -> Vec<String> {
    let mut v: Vec<String> = rows.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    v.sort();
    v
}

fn canon_table(data: &TableData) -> (Vec<String>, Vec<String>) {
    let mut cols: Vec<String> = data.schema.names().map(str::to_string).collect();
    let rows = data.records.iter().map(|r| cols.iter().map(|c| (c.clone(), r.get(c).to_json())).collect()).collect();
    cols.sort();
    (cols, canon_rows(rows))
}

fn row_canon(r: &Row) -> Canon {
    BTreeMap::from([("k".into(), json!(r.k)), ("s".into(), json!(r.s)), ("b".into(), json!(r.b))])
}

fn same(data: &TableData, mut cols: Vec<&str>, expected: Vec<Canon>) -> Result<(), TestCaseError> {
    cols.sort();
    let (have_cols, have) = canon_table(data);
    prop_assert_eq!(have_cols, cols);
    let want = canon_rows(expected);
    prop_assert_eq!(have, want);
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Cond {
    CmpK(usize, i64),
    CmpS(usize, String),
    Contains(String),
    IsNull(&'static str),
    IsNotNull(&'static str),
    EqB(bool),
    InK(Vec<i64>),
    InS(Vec<String>),
}

const CMPS: [Comparator; 6] = [Comparator::Eq, Comparator::Neq, Comparator::Lt, Comparator::Lte, Comparator::Gt, Comparator::Gte];

fn cmp_holds<T: Ord>(op: usize, a: &T, b: &T) -> bool {
    match op {
        0 => a == b,
        1 => a != b,
        2 => a < b,
        3 => a <= b,
        4 => a > b,
        _ => a >= b,
    }
}

impl Cond {
    pub fn clause(&self) -> Clause {
        match self {
            Cond::CmpK(op, c) => Clause::new("k", CMPS[*op], json!(c)),
            Cond::CmpS(op, c) => Clause::new("s", CMPS[*op], json!(c)),
            Cond::Contains(c) => Clause::new("s", Comparator::Contains, json!(c)),
            Cond::IsNull(f) => Clause::new(*f, Comparator::IsNull, J::Null),
            Cond::IsNotNull(f) => Clause::new(*f, Comparator::IsNotNull, J::Null),
            Cond::EqB(b) => Clause::new("b", Comparator::Eq, json!(b)),
            Cond::InK(set) => Clause::new("k", Comparator::InSet, json!(set)),
            Cond::InS(set) => Clause::new("s", Comparator::InSet, json!(set)),
        }
    }

    pub fn holds(&self, r: &Row) -> bool {
        let null = |f: &str| if f == "k" { r.k.is_none() } else { r.s.is_none() };
        match self {
            Cond::CmpK(op, c) => r.k.is_some_and(|k| cmp_holds(*op, &k, c)),
            Cond::CmpS(op, c) => r.s.as_ref().is_some_and(|s| cmp_holds(*op, s, c)),
            Cond::Contains(c) => r.s.as_ref().is_some_and(|s| s.contains(c.as_str())),
            Cond::IsNull(f) => null(f),
            Cond::IsNotNull(f) => !null(f),
            Cond::EqB(b) => r.b == *b,
            Cond::InK(set) => r.k.is_some_and(|k| set.contains(&k)),
            Cond::InS(set) => r.s.as_ref().is_some_and(|s| set.contains(s)),
        }
    }
}

pub fn cond() -> impl Strategy<Value = Cond> {
    prop_oneof![
        (0usize..6, -4i64..5).prop_map(|(o, c)| Cond::CmpK(o, c)),
        (0usize..6, "[ab]{0,2}").prop_map(|(o, c)| Cond::CmpS(o, c)),
        "[ab]{1,2}".prop_map(Cond::Contains),
        prop::sample::select(vec!["k", "s"]).prop_map(Cond::IsNull),
        prop::sample::select(vec!["k", "s"]).prop_map(Cond::IsNotNull),
        any::<bool>().prop_map(Cond::EqB),
        prop::collection::vec(-4i64..5, 0..4).prop_map(Cond::InK),
        prop::collection::vec("[ab]{0,2}", 0..4).prop_map(Cond::InS),
    ]
}

pub fn check_union(a: &[Row], b: &[Row]) -> Result<(), TestCaseError> {
    let (_d, tables) = scratch();
    let ta = register(&tables, "a", ["k", "s", "b"], a);
    let tb = register(&tables, "b", ["k", "s", "b"], b);
    let out = tables.derive(None, Operator::Union, &[ta, tb]).unwrap();
    let want = a.iter().chain(b).map(row_canon).collect();
    same(&tables.data(&out.id).unwrap(), vec!["k", "s", "b"], want)
}

pub fn check_filter(rows: &[Row], conds: &[Cond]) -> Result<(), TestCaseError> {
    let (_d, tables) = scratch();
    let t = register(&tables, "a", ["k", "s", "b"], rows);
    let predicate = Predicate { clauses: conds.iter().map(Cond::clause).collect() };
    let out = tables.derive(None, Operator::Filter { predicate }, &[t]).unwrap();
    let want = rows.iter().filter(|r| conds.iter().all(|c| c.holds(r))).map(row_canon).collect();
    same(&tables.data(&out.id).unwrap(), vec!["k", "s", "b"], want)
}

pub fn check_project(rows: &[Row], columns: &[&str]) -> Result<(), TestCaseError> {
    let (_d, tables) = scratch();
    let t = register(&tables, "a", ["k", "s", "b"], rows);
    let out = tables.derive(None, Operator::Project { columns: columns.iter().map(|c| c.to_string()).collect() }, &[t]).unwrap();
    let want = rows.iter().map(|r| row_canon(r).into_iter().filter(|(k, _)| columns.contains(&k.as_str())).collect()).collect();
    same(&tables.data(&out.id).unwrap(), columns.to_vec(), want)
}

pub fn check_join(left: &[Row], right: &[Row]) -> Result<(), TestCaseError> {
    let (_d, tables) = scratch();
    let l = register(&tables, "l", ["k", "s", "b"], left);
    let r = register(&tables, "r", ["k2", "t", "b"], right);
    let out = tables.derive(None, Operator::Join { on: vec![JoinKey::new("k", "k2")] }, &[l, r]).unwrap();
    let mut want = Vec::new();
    for a in left {
        for b in right {
            if a.k.is_some() && a.k == b.k {
                let mut row = row_canon(a);
                row.insert("t".into(), json!(b.s));
                row.insert("b_r".into(), json!(b.b));
                want.push(row);
            }
        }
    }
    same(&tables.data(&out.id).unwrap(), vec!["k", "s", "b", "t", "b_r"], want)
}

pub fn check_group(rows: &[Row], keys: &[&str]) -> Result<(), TestCaseError> {
    let (_d, tables) = scratch();
    let t = register(&tables, "a", ["k", "s", "b"], rows);
    let agg = |name: &str, aggregate, field: Option<&str>| GroupAggregation { name: name.into(), aggregate, field: field.map(str::to_string) };
    let op = Operator::Group {
        keys: keys.iter().map(|k| k.to_string()).collect(),
        aggregations: vec![
            agg("n", Aggregate::Count, None),
            agg("ns", Aggregate::Count, Some("s")),
            agg("fs", Aggregate::First, Some("s")),
            agg("cs", Aggregate::Collect, Some("s")),
        ],
    };
    let out = tables.derive(None, op, &[t]).unwrap();

    // Groups in order of first appearance; members in row order.
    let key_of = |r: &Row| -> Vec<J> { keys.iter().map(|k| if *k == "k" { json!(r.k) } else { json!(r.b) }).collect() };
    let mut groups: Vec<(Vec<J>, Vec<&Row>)> = Vec::new();
    for r in rows {
        let key = key_of(r);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let want = groups
        .into_iter()
        .map(|(key, members)| {
            let mut row: Canon = keys.iter().map(|k| k.to_string()).zip(key).collect();
            row.insert("n".into(), json!(members.len()));
            row.insert("ns".into(), json!(members.iter().filter(|m| m.s.is_some()).count()));
            row.insert("fs".into(), json!(members[0].s));
            row.insert("cs".into(), json!(members.iter().filter_map(|m| m.s.clone()).collect::<Vec<_>>()));
            row
        })
        .collect();
    let mut cols = keys.to_vec();
    cols.extend(["n", "ns", "fs", "cs"]);
    same(&tables.data(&out.id).unwrap(), cols, want)
}

pub fn columns() -> impl Strategy<Value = Vec<&'static str>> {
    prop::sample::subsequence(vec!["k", "s", "b"], 1..=3).prop_shuffle()
}

pub fn group_keys() -> impl Strategy<Value = Vec<&'static str>> {
    prop::sample::subsequence(vec!["k", "b"], 0..=2).prop_shuffle()
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn trials<S: Strategy>(name: &str, cases: u32, strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, check).map_err(|e| match e {
        TestError::Fail(reason, value) => format!("{name}: {reason} on {value:?}"),
        TestError::Abort(reason) => format!("{name}: aborted: {reason}"),
    })
}

/// Randomized trials of every operator against the reference versions.
pub fn operator_oracle(cases: u32, max_rows: usize) -> Outcome {
    let started = Instant::now();
    trials("union", cases, (rows(max_rows), rows(max_rows)), |(a, b)| check_union(&a, &b))?;
    trials("filter", cases, (rows(max_rows), prop::collection::vec(cond(), 0..3)), |(r, c)| check_filter(&r, &c))?;
    trials("project", cases, (rows(max_rows), columns()), |(r, c)| check_project(&r, &c))?;
    trials("join", cases, (rows(max_rows), rows(max_rows)), |(l, r)| check_join(&l, &r))?;
    trials("group", cases, (rows(max_rows), group_keys()), |(r, k)| check_group(&r, &k))?;
    let secs = started.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("{cases} trials per operator took {secs:.1}s"));
    }
    Ok(format!("{cases} trials x 5 operators, <= {max_rows} rows, {secs:.1}s"))
}

fn random_rows(rng: &mut ChaCha8Rng, max: usize) -> Vec<Row> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| Row {
            k: rng.gen_bool(0.8).then(|| rng.gen_range(-3..4)),
            s: rng.gen_bool(0.8).then(|| ["a", "b", "ab", "ba", ""][rng.gen_range(0..5)].to_string()),
            b: rng.gen(),
        })
        .collect()
}

fn random_op(rng: &mut ChaCha8Rng, tables: &TableStore, cur: &TableId, dim: &TableId, depth: usize) -> (Operator, Vec<TableId>) {
    let t = tables.get(cur).unwrap();
    let names: Vec<String> = t.schema.names().map(str::to_string).collect();
    let ints: Vec<String> = t.schema.fields().iter().filter(|f| f.ty == FieldType::Integer).map(|f| f.name.clone()).collect();
    let small = t.row_count <= 512;
    let pick = |rng: &mut ChaCha8Rng, v: &[String]| v[rng.gen_range(0..v.len())].clone();
    match rng.gen_range(0..6) {
        0 => {
            let clause = if ints.is_empty() {
                Clause::new(pick(rng, &names), Comparator::IsNotNull, J::Null)
            } else {
                Clause::new(pick(rng, &ints), Comparator::Gte, json!(rng.gen_range(-3..3)))
            };
            (Operator::Filter { predicate: Predicate::all().and(clause) }, vec![cur.clone()])
        }
        1 => {
            let mut cols = names.clone();
            cols.shuffle(rng);
            cols.truncate(rng.gen_range(1..=names.len()));
            (Operator::Project { columns: cols }, vec![cur.clone()])
        }
        3 if small && !ints.is_empty() => {
            (Operator::Join { on: vec![JoinKey::new(pick(rng, &ints), "k2")] }, vec![cur.clone(), dim.clone()])
        }
        4 => {
            let mut keys = names.clone();
            keys.shuffle(rng);
            keys.truncate(rng.gen_range(0..=names.len().min(2)));
            let aggregations = vec![GroupAggregation { name: format!("cnt{depth}"), aggregate: Aggregate::Count, field: None }];
            (Operator::Group { keys, aggregations }, vec![cur.clone()])
        }
        5 if names.len() > 1 => (Operator::DropColumns { columns: vec![pick(rng, &names)] }, vec![cur.clone()]),
        5 => {
            let n = pick(rng, &names);
            (Operator::RenameColumns { renames: BTreeMap::from([(n.clone(), format!("{n}_{depth}"))]) }, vec![cur.clone()])
        }
        _ if small => (Operator::Union, vec![cur.clone(), cur.clone()]),
        _ => (Operator::Project { columns: names }, vec![cur.clone()]),
    }
}

/// One random derivation chain. Returns the number of derivations checked.
pub fn check_chain(seed: u64, max_depth: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_d, tables) = scratch();
    let base = register(&tables, "base", ["k", "s", "b"], &random_rows(&mut rng, 32));
    let dim = register(&tables, "dim", ["k2", "t", "flag"], &random_rows(&mut rng, 8));
    let stored = |id: &TableId| tables.serialization(id).map_err(|e| format!("seed {seed}: {e}"));

    let mut chain: Vec<(TableId, Vec<u8>)> = vec![(base.clone(), stored(&base)?), (dim.clone(), stored(&dim)?)];
    let mut cur = base;
    let depth = rng.gen_range(1..=max_depth);
    for d in 1..=depth {
        let (op, deps) = random_op(&mut rng, &tables, &cur, &chain[1].0, d);
        let before: Vec<Vec<u8>> = deps.iter().map(&stored).collect::<Result<_, _>>()?;
        let out = tables.derive(None, op.clone(), &deps).map_err(|e| format!("seed {seed}: {} failed: {e}", op.name()))?;
        let after: Vec<Vec<u8>> = deps.iter().map(&stored).collect::<Result<_, _>>()?;
        if before != after {
            return Err(format!("seed {seed}: {} changed a dependency", op.name()));
        }
        let bytes = stored(&out.id)?;
        let again = tables.derive(None, op.clone(), &deps).map_err(|e| e.to_string())?;
        if stored(&again.id)? != bytes {
            return Err(format!("seed {seed}: {} is not deterministic", op.name()));
        }
        chain.push((out.id.clone(), bytes));
        chain.push((again.id, stored(&out.id)?));
        cur = out.id;
    }

    for (id, _) in &chain {
        tables.evict(id).map_err(|e| e.to_string())?;
    }
    for (id, bytes) in &chain {
        let replayed = tables.replay_lineage(id).map_err(|e| format!("seed {seed}: replay of {id}: {e}"))?.encode();
        if &replayed != bytes {
            return Err(format!("seed {seed}: replay of {id} differs from its serialization"));
        }
        if &stored(id)? != bytes {
            return Err(format!("seed {seed}: rematerialized {id} differs"));
        }
    }
    Ok(depth)
}

pub fn lineage_chains(chains: u64, max_depth: usize) -> Outcome {
    let mut derivations = 0;
    for seed in 0..chains {
        derivations += check_chain(seed, max_depth)?;
    }
    Ok(format!("{chains} chains, {derivations} derivations, zero violations"))
}
