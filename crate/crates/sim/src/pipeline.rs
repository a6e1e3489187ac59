//! Built-in test pipelines: input generators, map and reduce functions,
//! output schemas, and a brute-force oracle for each.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pullshuffle::control::Directive;
use pullshuffle::mapper::{partition_by_hash, MapContext, MapError, Mapper};
use pullshuffle::reducer::{ReduceContext, ReduceError, Reducer};
use pullshuffle::row::{hash_partition, NameTable, PartitionedRowset, Row, RowError, Rowset, Value};
use pullshuffle::store::{SortedSchema, Store, StoreError, Transaction};

use crate::spec::{InputSpec, PipelineId};

pub const EFFECTS_TABLE: &str = "effects";
pub const TALLY_TABLE: &str = "tally";
pub const ACCESS_TABLE: &str = "access";

const REDUCER_CONTROL_PREFIX: &str = "rctl:";

fn names(cols: &[&str]) -> NameTable {
    NameTable::from_names(cols.iter().copied()).expect("static names are unique")
}

/// Identity of one emitted row in the tally pipeline.
pub type EffectId = (i64, i64);

/// One mapped row as the oracle sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffledRow {
    pub reducer: u32,
    pub effect: Option<EffectId>,
}

impl PipelineId {
    pub fn input_names(self) -> NameTable {
        match self {
            PipelineId::ExactlyOnceTally => names(&["id", "key", "value", "payload"]),
            PipelineId::AccessTally => names(&["ts", "user", "cluster", "path", "payload"]),
            PipelineId::PassThrough => names(&["id", "key", "payload"]),
        }
    }

    /// User tables written by the reducer, with their schemas.
    pub fn output_tables(self) -> Vec<(&'static str, SortedSchema)> {
        match self {
            PipelineId::ExactlyOnceTally => vec![
                (EFFECTS_TABLE, SortedSchema::new(names(&["id", "sub", "count"]), 2)),
                (TALLY_TABLE, SortedSchema::new(names(&["key", "count", "sum"]), 1)),
            ],
            PipelineId::AccessTally => {
                vec![(ACCESS_TABLE, SortedSchema::new(names(&["user", "cluster", "count", "last_ts"]), 2))]
            }
            PipelineId::PassThrough => vec![],
        }
    }

    pub fn supports_control_rows(self) -> bool {
        self == PipelineId::ExactlyOnceTally
    }

    pub fn mapper(self, reducer_count: u32) -> Box<dyn Mapper> {
        match self {
            PipelineId::ExactlyOnceTally => Box::new(TallyMapper { reducer_count }),
            PipelineId::AccessTally => Box::new(AccessMapper { reducer_count }),
            PipelineId::PassThrough => Box::new(PassThroughMapper { reducer_count }),
        }
    }

    pub fn reducer(self) -> Box<dyn Reducer> {
        match self {
            PipelineId::ExactlyOnceTally => Box::new(TallyReducer),
            PipelineId::AccessTally => Box::new(AccessReducer),
            PipelineId::PassThrough => Box::new(|_: &Store, _: &Rowset, _: &mut ReduceContext| Ok(None)),
        }
    }
}

fn payload(rng: &mut ChaCha8Rng, len: usize) -> Value {
    Value::String((0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect())
}

/// Deterministic input rows for one partition, control rows included.
pub fn generate_partition(pipeline: PipelineId, input: &InputSpec, mapper_count: u32, partition: u32, seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (partition as u64 + 1));
    let mut rows = Vec::with_capacity(input.rows_per_partition as usize);
    for i in 0..input.rows_per_partition {
        let row = match pipeline {
            PipelineId::ExactlyOnceTally => Row::new(vec![
                Value::Int64((i * mapper_count as u64 + partition as u64) as i64),
                Value::str(format!("k{}", rng.gen_range(0..input.key_cardinality))),
                Value::Int64(rng.gen_range(-100..1000)),
                payload(&mut rng, input.payload_bytes),
            ]),
            PipelineId::AccessTally => {
                let user = if rng.gen_bool(input.missing_user_fraction) {
                    Value::Null
                } else {
                    Value::str(format!("u{}", rng.gen_range(0..input.key_cardinality)))
                };
                Row::new(vec![
                    Value::Int64((i * 10 + partition as u64) as i64),
                    user,
                    Value::str(format!("c{}", rng.gen_range(0..4))),
                    Value::str(format!("/data/{}", rng.gen_range(0..1000))),
                    payload(&mut rng, input.payload_bytes),
                ])
            }
            PipelineId::PassThrough => Row::new(vec![
                Value::Int64((i * mapper_count as u64 + partition as u64) as i64),
                Value::str(format!("k{}", rng.gen_range(0..input.key_cardinality))),
                payload(&mut rng, input.payload_bytes),
            ]),
        };
        rows.push(row);
    }
    if pipeline == PipelineId::ExactlyOnceTally {
        let mut controls: Vec<(u64, usize, &str)> = input
            .control_rows
            .iter()
            .enumerate()
            .filter(|(_, c)| c.partition == partition)
            .map(|(n, c)| (c.at_row, n, c.directive.as_str()))
            .collect();
        controls.sort();
        for (shift, (at, n, directive)) in controls.into_iter().enumerate() {
            let control = Row::new(vec![
                Value::Int64(i64::MAX / 2 + n as i64),
                Value::str(directive),
                Value::Int64(0),
                Value::String(Vec::new()),
            ]);
            let pos = (at as usize + shift).min(rows.len());
            rows.insert(pos, control);
        }
    }
    rows
}

/// Encoded size of the data rows, the payload the engine moves.
pub fn payload_bytes(rows: &[Row]) -> u64 {
    rows.iter().map(|r| r.encoded_len() as u64).sum()
}

fn row_error(e: RowError) -> MapError {
    MapError::Failed(e.to_string())
}

struct TallyMapper {
    reducer_count: u32,
}

impl Mapper for TallyMapper {
    fn map(&mut self, input: &Rowset, ctx: &mut MapContext) -> Result<PartitionedRowset, MapError> {
        let out_names = names(&["id", "sub", "key", "value", "payload"]);
        let pos = |c: &str| input.name_table().position(c).ok_or_else(|| MapError::Failed(format!("input has no {c} column")));
        let (id, key, value, pay) = (pos("id")?, pos("key")?, pos("value")?, pos("payload")?);
        let mut rows = Vec::new();
        for (n, row) in input.rows().iter().enumerate() {
            let id_v = row.get(id).as_i64().ok_or_else(|| MapError::Failed("id is not an integer".into()))?;
            let key_v = row.get(key).as_str().unwrap_or_default();
            if let Some(d) = Directive::parse(key_v) {
                ctx.control(n, d);
                continue;
            }
            let copies = if key_v.starts_with(REDUCER_CONTROL_PREFIX) {
                1
            } else if id_v % 7 == 0 {
                0
            } else if id_v % 5 == 0 {
                2
            } else {
                1
            };
            for sub in 0..copies {
                rows.push(Row::new(vec![
                    Value::Int64(id_v),
                    Value::Int64(sub),
                    row.get(key).clone(),
                    row.get(value).clone(),
                    row.get(pay).clone(),
                ]));
            }
        }
        let rowset = Rowset::new(out_names, rows).map_err(row_error)?;
        partition_by_hash(rowset, &["key"], self.reducer_count).map_err(row_error)
    }
}

struct TallyReducer;

impl Reducer for TallyReducer {
    fn reduce(&mut self, store: &Store, batch: &Rowset, ctx: &mut ReduceContext) -> Result<Option<Transaction>, ReduceError> {
        let mut tx = store.begin();
        for n in 0..batch.len() {
            let id = batch.value(n, "id").clone();
            let key = batch.value(n, "key").clone();
            if let Some(k) = key.as_str().filter(|k| k.starts_with(REDUCER_CONTROL_PREFIX)) {
                if let Some(d) = Directive::parse(&k[1..]) {
                    ctx.control(id.as_i64().unwrap_or_default() as u64, d);
                }
                continue;
            }
            let effect_key = [id.clone(), batch.value(n, "sub").clone()];
            let seen = tx.read(EFFECTS_TABLE, &effect_key)?.map_or(0, |r| r.get(2).as_i64().unwrap_or(0));
            tx.write(EFFECTS_TABLE, Row::new(vec![effect_key[0].clone(), effect_key[1].clone(), Value::Int64(seen + 1)]))?;

            let value = batch.value(n, "value").as_i64().unwrap_or(0);
            let (count, sum) = tx
                .read(TALLY_TABLE, std::slice::from_ref(&key))?
                .map_or((0, 0), |r| (r.get(1).as_i64().unwrap_or(0), r.get(2).as_i64().unwrap_or(0)));
            tx.write(TALLY_TABLE, Row::new(vec![key, Value::Int64(count + 1), Value::Int64(sum + value)]))?;
        }
        Ok(Some(tx))
    }
}

struct AccessMapper {
    reducer_count: u32,
}

impl Mapper for AccessMapper {
    fn map(&mut self, input: &Rowset, _ctx: &mut MapContext) -> Result<PartitionedRowset, MapError> {
        let out_names = names(&["user", "cluster", "ts", "payload"]);
        let mut rows = Vec::new();
        for n in 0..input.len() {
            let user = input.value(n, "user");
            if user.is_null() {
                continue;
            }
            rows.push(Row::new(vec![
                user.clone(),
                input.value(n, "cluster").clone(),
                input.value(n, "ts").clone(),
                input.value(n, "payload").clone(),
            ]));
        }
        let rowset = Rowset::new(out_names, rows).map_err(row_error)?;
        partition_by_hash(rowset, &["user", "cluster"], self.reducer_count).map_err(row_error)
    }
}

struct AccessReducer;

impl Reducer for AccessReducer {
    fn reduce(&mut self, store: &Store, batch: &Rowset, _ctx: &mut ReduceContext) -> Result<Option<Transaction>, ReduceError> {
        let mut tx = store.begin();
        for n in 0..batch.len() {
            let key = [batch.value(n, "user").clone(), batch.value(n, "cluster").clone()];
            let ts = batch.value(n, "ts").as_i64().unwrap_or(0);
            let (count, last) = tx
                .read(ACCESS_TABLE, &key)?
                .map_or((0, i64::MIN), |r| (r.get(2).as_i64().unwrap_or(0), r.get(3).as_i64().unwrap_or(i64::MIN)));
            let [user, cluster] = key;
            tx.write(ACCESS_TABLE, Row::new(vec![user, cluster, Value::Int64(count + 1), Value::Int64(last.max(ts))]))?;
        }
        Ok(Some(tx))
    }
}

struct PassThroughMapper {
    reducer_count: u32,
}

impl Mapper for PassThroughMapper {
    fn map(&mut self, input: &Rowset, _ctx: &mut MapContext) -> Result<PartitionedRowset, MapError> {
        partition_by_hash(input.clone(), &["key"], self.reducer_count).map_err(row_error)
    }
}

/// Expected final contents of the user tables, computed by folding over the
/// raw input without the engine.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Oracle {
    pub tables: BTreeMap<String, Vec<Row>>,
    pub effects: BTreeSet<EffectId>,
}

impl Oracle {
    pub fn compute(pipeline: PipelineId, partitions: &[Vec<Row>]) -> Oracle {
        let mut oracle = Oracle::default();
        match pipeline {
            PipelineId::ExactlyOnceTally => {
                let mut tally: BTreeMap<String, (i64, i64)> = BTreeMap::new();
                for row in partitions.iter().flatten() {
                    let id = row.get(0).as_i64().unwrap();
                    let key = row.get(1).as_str().unwrap().to_string();
                    if key.starts_with("ctl:") || key.starts_with(REDUCER_CONTROL_PREFIX) || id % 7 == 0 {
                        continue;
                    }
                    let copies = if id % 5 == 0 { 2 } else { 1 };
                    let value = row.get(2).as_i64().unwrap();
                    let e = tally.entry(key).or_default();
                    e.0 += copies;
                    e.1 += copies * value;
                    for sub in 0..copies {
                        oracle.effects.insert((id, sub));
                    }
                }
                let effects = oracle.effects.iter().map(|&(id, sub)| Row::new(vec![Value::Int64(id), Value::Int64(sub), Value::Int64(1)]));
                oracle.tables.insert(EFFECTS_TABLE.into(), effects.collect());
                let tally = tally.into_iter().map(|(k, (c, s))| Row::new(vec![Value::str(k), Value::Int64(c), Value::Int64(s)]));
                oracle.tables.insert(TALLY_TABLE.into(), tally.collect());
            }
            PipelineId::AccessTally => {
                let mut access: BTreeMap<(String, String), (i64, i64)> = BTreeMap::new();
                for row in partitions.iter().flatten() {
                    let Some(user) = row.get(1).as_str() else { continue };
                    let e = access.entry((user.to_string(), row.get(2).as_str().unwrap().to_string())).or_insert((0, i64::MIN));
                    e.0 += 1;
                    e.1 = e.1.max(row.get(0).as_i64().unwrap());
                }
                let rows = access
                    .into_iter()
                    .map(|((u, c), (n, ts))| Row::new(vec![Value::str(u), Value::str(c), Value::Int64(n), Value::Int64(ts)]));
                oracle.tables.insert(ACCESS_TABLE.into(), rows.collect());
            }
            PipelineId::PassThrough => {}
        }
        oracle
    }
}

/// Shuffle-numbered view of one partition: entry `i` describes the mapped
/// row with shuffle index `i`. Relies only on the map being applied row by
/// row, so batch boundaries do not matter.
pub fn shuffle_layout(pipeline: PipelineId, rows: &[Row], reducer_count: u32) -> Vec<ShuffledRow> {
    let mut out = Vec::new();
    match pipeline {
        PipelineId::ExactlyOnceTally => {
            let nt = names(&["key"]);
            for row in rows {
                let id = row.get(0).as_i64().unwrap();
                let key = row.get(1).as_str().unwrap();
                if key.starts_with("ctl:") {
                    continue;
                }
                let reducer = hash_partition(&Row::new(vec![row.get(1).clone()]), &nt, &["key"], reducer_count).unwrap();
                if key.starts_with(REDUCER_CONTROL_PREFIX) {
                    out.push(ShuffledRow { reducer, effect: None });
                    continue;
                }
                let copies = if id % 7 == 0 { 0 } else if id % 5 == 0 { 2 } else { 1 };
                for sub in 0..copies {
                    out.push(ShuffledRow { reducer, effect: Some((id, sub)) });
                }
            }
        }
        PipelineId::AccessTally => {
            let nt = names(&["user", "cluster"]);
            for row in rows.iter().filter(|r| !r.get(1).is_null()) {
                let key = Row::new(vec![row.get(1).clone(), row.get(2).clone()]);
                out.push(ShuffledRow { reducer: hash_partition(&key, &nt, &["user", "cluster"], reducer_count).unwrap(), effect: None });
            }
        }
        PipelineId::PassThrough => {
            let nt = names(&["key"]);
            for row in rows {
                let key = Row::new(vec![row.get(1).clone()]);
                out.push(ShuffledRow { reducer: hash_partition(&key, &nt, &["key"], reducer_count).unwrap(), effect: None });
            }
        }
    }
    out
}

/// Creates the pipeline's user tables.
pub fn create_output_tables(store: &Store, pipeline: PipelineId) -> Result<(), StoreError> {
    for (name, schema) in pipeline.output_tables() {
        store.create_sorted_table(name, schema)?;
    }
    Ok(())
}
