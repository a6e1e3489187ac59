//! Reducer worker.
//!
//! A round snapshots the reducer's persisted progress (one committed shuffle
//! index per mapper), asks every mapper for rows past that index, hands the
//! combined batch to the user function and commits the user's writes and the
//! advanced progress in one transaction. The progress row is re-read inside
//! that transaction; if another instance moved it in the meantime nothing is
//! committed.
//!
//! Rounds are split into [`ReducerRuntime::begin_round`] and
//! [`ReducerRuntime::finish_round`] so a driver can run the fetches however
//! it likes (simulated network, sockets, direct calls).

use std::collections::BTreeMap;

use crate::control::Directive;
use crate::row::{decode_rowset, ByteReader, NameTable, Row, Rowset, RowsetBuilder, Value};
use crate::store::{CommitResult, SortedSchema, Store, StoreError, Transaction};
use crate::transport::messages::{GetRowsRequest, GetRowsResponse, RpcError, NOTHING_COMMITTED};
use crate::Guid;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReduceError {
    #[error("reduce failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReducerError {
    #[error("reducer state row is malformed: {0}")]
    CorruptState(String),
    #[error("a deferred commit is still pending")]
    DeferredPending,
    #[error("no deferred commit to complete")]
    NothingDeferred,
}

#[derive(Debug, Default)]
pub struct ReduceContext {
    directives: Vec<(u64, Directive)>,
}

impl ReduceContext {
    /// Records a control directive. `tag` should identify the row that
    /// carried it in a way that survives re-delivery, so a driver can act on
    /// each directive once.
    pub fn control(&mut self, tag: u64, directive: Directive) {
        self.directives.push((tag, directive));
    }
}

/// User reduce function.
///
/// It may return an open transaction holding its writes; the runtime then
/// adds its progress update to that transaction and commits both together.
/// Returning `None` lets the runtime open one itself.
pub trait Reducer: Send {
    fn reduce(&mut self, store: &Store, batch: &Rowset, ctx: &mut ReduceContext) -> Result<Option<Transaction>, ReduceError>;
}

impl<F> Reducer for F
where
    F: FnMut(&Store, &Rowset, &mut ReduceContext) -> Result<Option<Transaction>, ReduceError> + Send,
{
    fn reduce(&mut self, store: &Store, batch: &Rowset, ctx: &mut ReduceContext) -> Result<Option<Transaction>, ReduceError> {
        self(store, batch, ctx)
    }
}

/// How the user writes and the progress update reach the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CommitOrder {
    /// One transaction carries both.
    #[default]
    Atomic,
    /// Broken on purpose: user writes commit first, progress is deferred.
    UserFirst,
    /// Broken on purpose: progress commits first, user writes are deferred.
    MetaFirst,
}

#[derive(Debug, Clone)]
pub struct ReducerConfig {
    pub reducer_index: u32,
    pub mapper_count: u32,
    pub state_table: String,
    pub max_rows_per_mapper: i64,
    pub backoff_ms: u64,
    pub commit_order: CommitOrder,
}

impl ReducerConfig {
    pub fn new(reducer_index: u32, mapper_count: u32, state_table: impl Into<String>) -> Self {
        ReducerConfig {
            reducer_index,
            mapper_count,
            state_table: state_table.into(),
            max_rows_per_mapper: 512,
            backoff_ms: 100,
            commit_order: CommitOrder::Atomic,
        }
    }
}

/// Last committed shuffle index per mapper; [`NOTHING_COMMITTED`] when none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducerState {
    pub committed_row_indices: Vec<i64>,
}

impl ReducerState {
    pub fn initial(mapper_count: u32) -> Self {
        ReducerState { committed_row_indices: vec![NOTHING_COMMITTED; mapper_count as usize] }
    }

    /// `u32` count then one little-endian `i64` per mapper.
    pub fn encode_indices(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.committed_row_indices.len());
        out.extend_from_slice(&(self.committed_row_indices.len() as u32).to_le_bytes());
        for i in &self.committed_row_indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn decode_indices(bytes: &[u8]) -> Result<Self, ReducerError> {
        let bad = |e: crate::row::RowError| ReducerError::CorruptState(e.to_string());
        let mut r = ByteReader::new(bytes);
        let n = r.u32().map_err(bad)? as usize;
        if n * 8 != r.remaining() {
            return Err(ReducerError::CorruptState(format!("{n} indices in {} bytes", r.remaining())));
        }
        let committed_row_indices = (0..n).map(|_| r.u64().map(|v| v as i64)).collect::<Result<_, _>>().map_err(bad)?;
        Ok(ReducerState { committed_row_indices })
    }

    pub fn to_row(&self, reducer_index: u32) -> Row {
        Row::new(vec![Value::Int64(reducer_index as i64), Value::String(self.encode_indices())])
    }

    /// Decodes a state row; an absent row means nothing was committed yet.
    pub fn from_row(row: Option<&Row>, mapper_count: u32) -> Result<Self, ReducerError> {
        let Some(row) = row else {
            return Ok(Self::initial(mapper_count));
        };
        let bytes = row.get(1).as_bytes().ok_or_else(|| ReducerError::CorruptState("committed_row_indices".into()))?;
        let state = Self::decode_indices(bytes)?;
        if state.committed_row_indices.len() != mapper_count as usize {
            return Err(ReducerError::CorruptState(format!(
                "{} indices for {mapper_count} mappers",
                state.committed_row_indices.len()
            )));
        }
        Ok(state)
    }
}

pub fn reducer_state_schema() -> SortedSchema {
    let names = NameTable::from_names(["reducer_index", "committed_row_indices"]).expect("static names are unique");
    SortedSchema::new(names, 1)
}

/// What a round needs to send: one request per mapper index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub snapshot: ReducerState,
    reducer_index: u32,
    count: i64,
}

impl RoundPlan {
    pub fn mappers(&self) -> impl Iterator<Item = u32> + '_ {
        0..self.snapshot.committed_row_indices.len() as u32
    }

    pub fn request(&self, mapper_index: u32, mapper_id: Guid) -> GetRowsRequest {
        GetRowsRequest {
            count: self.count,
            reducer_index: self.reducer_index as i64,
            committed_row_index: self.snapshot.committed_row_indices[mapper_index as usize],
            mapper_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoundOutcome {
    Committed,
    NothingToDo,
    SplitBrainSkip,
    TransientError(String),
    /// Half of a deliberately broken commit went through; the other half
    /// waits for [`ReducerRuntime::complete_deferred`].
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundReport {
    pub outcome: RoundOutcome,
    pub previous: ReducerState,
    pub next: ReducerState,
    /// Mapper indexes whose entry moved forward (only meaningful when the
    /// round committed).
    pub advanced: Vec<u32>,
    pub rows: u64,
    pub directives: Vec<(u64, Directive)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReducerStats {
    pub rounds: u64,
    pub commits: u64,
    pub nothing_to_do: u64,
    pub split_brain_skips: u64,
    pub transient_errors: u64,
    pub discarded_responses: u64,
    pub rows_reduced: u64,
}

struct Deferred {
    tx: Transaction,
    report: RoundReport,
}

pub struct ReducerRuntime {
    config: ReducerConfig,
    id: Guid,
    store: Store,
    reducer: Box<dyn Reducer>,
    deferred: Option<Deferred>,
    stats: ReducerStats,
}

impl std::fmt::Debug for ReducerRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducerRuntime")
            .field("index", &self.config.reducer_index)
            .field("id", &self.id)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl ReducerRuntime {
    pub fn new(config: ReducerConfig, id: Guid, store: Store, reducer: Box<dyn Reducer>) -> Self {
        ReducerRuntime { config, id, store, reducer, deferred: None, stats: ReducerStats::default() }
    }

    pub fn id(&self) -> Guid {
        self.id
    }

    pub fn config(&self) -> &ReducerConfig {
        &self.config
    }

    pub fn stats(&self) -> ReducerStats {
        self.stats
    }

    pub fn has_deferred(&self) -> bool {
        self.deferred.is_some()
    }

    fn key(&self) -> [Value; 1] {
        [Value::Int64(self.config.reducer_index as i64)]
    }

    /// Snapshots the committed progress and prepares the round's requests.
    pub fn begin_round(&mut self) -> Result<RoundPlan, RoundOutcome> {
        if self.deferred.is_some() {
            return Err(RoundOutcome::TransientError(ReducerError::DeferredPending.to_string()));
        }
        self.stats.rounds += 1;
        let row = match self.store.fetch(&self.config.state_table, &self.key()) {
            Ok(row) => row,
            Err(e) => return Err(self.transient(e.to_string())),
        };
        let snapshot = match ReducerState::from_row(row.as_ref(), self.config.mapper_count) {
            Ok(s) => s,
            Err(e) => return Err(self.transient(e.to_string())),
        };
        Ok(RoundPlan { snapshot, reducer_index: self.config.reducer_index, count: self.config.max_rows_per_mapper })
    }

    fn transient(&mut self, reason: String) -> RoundOutcome {
        self.stats.transient_errors += 1;
        tracing::debug!(reducer = self.config.reducer_index, %reason, "round failed");
        RoundOutcome::TransientError(reason)
    }

    /// Completes a round with whatever responses arrived. Mappers missing
    /// from `responses`, failed calls and undecodable attachments leave the
    /// corresponding entry unchanged.
    pub fn finish_round(&mut self, plan: RoundPlan, responses: BTreeMap<u32, Result<GetRowsResponse, RpcError>>) -> RoundReport {
        let previous = plan.snapshot;
        let mut next = previous.clone();
        let mut advanced = Vec::new();
        let mut parts: Vec<(u32, Rowset)> = Vec::new();
        for (mapper, response) in responses {
            let Some(slot) = next.committed_row_indices.get_mut(mapper as usize) else { continue };
            let Ok(rsp) = response else { continue };
            let Some(last) = rsp.last_shuffle_row_index else { continue };
            if rsp.row_count <= 0 {
                continue;
            }
            match decode_rowset(&rsp.attachment) {
                Ok(rows) if rows.len() as i64 == rsp.row_count && last > *slot => {
                    *slot = last;
                    advanced.push(mapper);
                    parts.push((mapper, rows));
                }
                _ => self.stats.discarded_responses += 1,
            }
        }
        let mut report = RoundReport { outcome: RoundOutcome::NothingToDo, previous, next, advanced, rows: 0, directives: Vec::new() };
        if parts.is_empty() {
            self.stats.nothing_to_do += 1;
            return report;
        }

        let mut builder = RowsetBuilder::new();
        for (_, rows) in &parts {
            builder.extend_all(rows);
        }
        let batch = builder.finish();
        report.rows = batch.len() as u64;

        let mut ctx = ReduceContext::default();
        let user_tx = match self.reducer.reduce(&self.store, &batch, &mut ctx) {
            Ok(tx) => tx,
            Err(e) => {
                report.outcome = self.transient(e.to_string());
                return report;
            }
        };
        report.directives = ctx.directives;

        report.outcome = match self.config.commit_order {
            CommitOrder::Atomic => {
                let tx = user_tx.unwrap_or_else(|| self.store.begin());
                self.commit_meta(tx, &report)
            }
            CommitOrder::UserFirst => {
                if let Some(mut tx) = user_tx {
                    match tx.commit() {
                        Ok(CommitResult::Committed { .. }) => {}
                        Ok(CommitResult::ConflictAbort) => return self.fail(report, "user commit conflicted".into()),
                        Err(e) => return self.fail(report, e.to_string()),
                    }
                }
                let meta = self.store.begin();
                self.deferred = Some(Deferred { tx: meta, report: report.clone() });
                RoundOutcome::Deferred
            }
            CommitOrder::MetaFirst => match self.commit_meta(self.store.begin(), &report) {
                RoundOutcome::Committed => {
                    let tx = user_tx.unwrap_or_else(|| self.store.begin());
                    self.deferred = Some(Deferred { tx, report: report.clone() });
                    RoundOutcome::Deferred
                }
                other => other,
            },
        };
        if report.outcome == RoundOutcome::Committed {
            self.stats.rows_reduced += report.rows;
        }
        report
    }

    fn fail(&mut self, mut report: RoundReport, reason: String) -> RoundReport {
        report.outcome = self.transient(reason);
        report
    }

    /// Re-reads the progress row in `tx`, and if it still matches the
    /// round's snapshot, writes the new progress and commits.
    fn commit_meta(&mut self, mut tx: Transaction, report: &RoundReport) -> RoundOutcome {
        let current = match tx.read(&self.config.state_table, &self.key()) {
            Ok(row) => ReducerState::from_row(row.as_ref(), self.config.mapper_count),
            Err(e) => return self.transient(e.to_string()),
        };
        match current {
            Ok(current) if current == report.previous => {}
            Ok(_) => {
                tx.abort();
                self.stats.split_brain_skips += 1;
                return RoundOutcome::SplitBrainSkip;
            }
            Err(e) => return self.transient(e.to_string()),
        }
        if let Err(e) = tx.write(&self.config.state_table, report.next.to_row(self.config.reducer_index)) {
            return self.transient(e.to_string());
        }
        match tx.commit() {
            Ok(CommitResult::Committed { .. }) => {
                self.stats.commits += 1;
                RoundOutcome::Committed
            }
            Ok(CommitResult::ConflictAbort) => self.transient("commit conflict".into()),
            Err(e) => self.transient(e.to_string()),
        }
    }

    /// Finishes the second half of a broken-order commit.
    pub fn complete_deferred(&mut self) -> Result<RoundOutcome, ReducerError> {
        let Deferred { mut tx, report } = self.deferred.take().ok_or(ReducerError::NothingDeferred)?;
        let outcome = match self.config.commit_order {
            CommitOrder::UserFirst => self.commit_meta(tx, &report),
            _ => match tx.commit() {
                Ok(CommitResult::Committed { .. }) => RoundOutcome::Committed,
                Ok(CommitResult::ConflictAbort) => self.transient("user commit conflicted".into()),
                Err(e) => self.transient(e.to_string()),
            },
        };
        if outcome == RoundOutcome::Committed {
            self.stats.rows_reduced += report.rows;
        }
        Ok(outcome)
    }

    /// Runs a whole round with a synchronous fetch function, completing any
    /// deferred half immediately.
    pub fn step<F>(&mut self, mut fetch: F) -> RoundReport
    where
        F: FnMut(u32, i64) -> Option<Result<GetRowsResponse, RpcError>>,
    {
        let plan = match self.begin_round() {
            Ok(plan) => plan,
            Err(outcome) => {
                let state = ReducerState::initial(self.config.mapper_count);
                return RoundReport { outcome, previous: state.clone(), next: state, advanced: vec![], rows: 0, directives: vec![] };
            }
        };
        let mut responses = BTreeMap::new();
        for m in plan.mappers() {
            if let Some(r) = fetch(m, plan.snapshot.committed_row_indices[m as usize]) {
                responses.insert(m, r);
            }
        }
        let mut report = self.finish_round(plan, responses);
        if report.outcome == RoundOutcome::Deferred {
            report.outcome = self.complete_deferred().expect("deferred half exists");
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::row::encode_rowset;

    const STATE: &str = "reducer_state";
    const OUT: &str = "tally";

    fn store() -> Store {
        let store = Store::new();
        store.create_sorted_table(STATE, reducer_state_schema()).unwrap();
        let names = NameTable::from_names(["key", "count"]).unwrap();
        store.create_sorted_table(OUT, SortedSchema::new(names, 1)).unwrap();
        store
    }

    fn rows(keys: &[&str]) -> Rowset {
        let names = NameTable::from_names(["key"]).unwrap();
        Rowset::new(names, keys.iter().map(|k| Row::new(vec![Value::str(k)])).collect()).unwrap()
    }

    fn response(keys: &[&str], last: i64) -> Result<GetRowsResponse, RpcError> {
        Ok(GetRowsResponse { row_count: keys.len() as i64, last_shuffle_row_index: Some(last), attachment: encode_rowset(&rows(keys)) })
    }

    fn tally() -> Box<dyn Reducer> {
        Box::new(|store: &Store, batch: &Rowset, _: &mut ReduceContext| {
            let mut tx = store.begin();
            for row in batch.rows() {
                let key = row.get(0).clone();
                let current = tx.read(OUT, std::slice::from_ref(&key))?.map_or(0, |r| r.get(1).as_i64().unwrap());
                tx.write(OUT, Row::new(vec![key, Value::Int64(current + 1)]))?;
            }
            Ok(Some(tx))
        })
    }

    fn passthrough() -> Box<dyn Reducer> {
        Box::new(|_: &Store, _: &Rowset, _: &mut ReduceContext| Ok(None))
    }

    fn count(store: &Store, key: &str) -> Option<i64> {
        store.get(OUT, &[Value::str(key)]).unwrap().map(|r| r.get(1).as_i64().unwrap())
    }

    fn state(store: &Store) -> ReducerState {
        ReducerState::from_row(store.get(STATE, &[Value::Int64(0)]).unwrap().as_ref(), 2).unwrap()
    }

    #[test]
    fn state_encoding_round_trips() {
        let s = ReducerState { committed_row_indices: vec![-1, 0, 12, i64::MAX] };
        assert_eq!(ReducerState::decode_indices(&s.encode_indices()).unwrap(), s);
        assert!(ReducerState::decode_indices(&[2, 0, 0, 0, 1]).is_err());
        assert_eq!(ReducerState::from_row(None, 3).unwrap(), ReducerState::initial(3));
    }

    #[test]
    fn all_mappers_empty_is_nothing_to_do() {
        let store = store();
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store.clone(), tally());
        let seq = store.commit_seq();
        let report = rt.step(|_, _| Some(Ok(GetRowsResponse::default())));
        assert_eq!(report.outcome, RoundOutcome::NothingToDo);
        assert_eq!(store.commit_seq(), seq);
    }

    #[test]
    fn failed_mapper_keeps_its_entry() {
        let store = store();
        let mut tx = store.begin();
        tx.write(STATE, ReducerState { committed_row_indices: vec![4, 7] }.to_row(0)).unwrap();
        tx.commit().unwrap();
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store.clone(), tally());
        let report = rt.step(|m, committed| {
            Some(match m {
                0 => {
                    assert_eq!(committed, 4);
                    response(&["a", "b", "a"], 12)
                }
                _ => Err(RpcError::Timeout),
            })
        });
        assert_eq!(report.outcome, RoundOutcome::Committed);
        assert_eq!(report.advanced, vec![0]);
        assert_eq!(state(&store).committed_row_indices, vec![12, 7]);
        assert_eq!(count(&store, "a"), Some(2));
        assert_eq!(count(&store, "b"), Some(1));
    }

    #[test]
    fn first_request_carries_nothing_committed() {
        let store = store();
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store.clone(), passthrough());
        let mut seen = vec![];
        let report = rt.step(|m, committed| {
            seen.push(committed);
            Some(if m == 1 { response(&["x"], 0) } else { Ok(GetRowsResponse::default()) })
        });
        assert_eq!(seen, vec![-1, -1]);
        assert_eq!(report.outcome, RoundOutcome::Committed);
        assert_eq!(state(&store).committed_row_indices, vec![-1, 0]);
    }

    #[test]
    fn batch_is_ordered_by_mapper() {
        let store = store();
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let sink = seen.clone();
        let reducer = Box::new(move |_: &Store, batch: &Rowset, _: &mut ReduceContext| {
            sink.lock().unwrap().extend(batch.rows().iter().map(|r| r.get(0).as_str().unwrap().to_string()));
            Ok(None)
        });
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store, reducer);
        let mut responses = BTreeMap::new();
        responses.insert(1, response(&["c"], 3));
        responses.insert(0, response(&["a", "b"], 5));
        let plan = rt.begin_round().unwrap();
        rt.finish_round(plan, responses);
        assert_eq!(*seen.lock().unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn concurrent_commit_makes_round_skip() {
        let store = store();
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store.clone(), tally());
        let mut impostor = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(2), store.clone(), tally());
        let plan = rt.begin_round().unwrap();
        let r = impostor.step(|m, _| Some(if m == 0 { response(&["a"], 0) } else { Ok(GetRowsResponse::default()) }));
        assert_eq!(r.outcome, RoundOutcome::Committed);

        let mut responses = BTreeMap::new();
        responses.insert(0, response(&["a"], 0));
        let report = rt.finish_round(plan, responses);
        assert_eq!(report.outcome, RoundOutcome::SplitBrainSkip);
        assert_eq!(count(&store, "a"), Some(1));
        assert_eq!(state(&store).committed_row_indices, vec![0, -1]);
    }

    #[test]
    fn failing_reduce_changes_nothing() {
        let store = store();
        let reducer = Box::new(|_: &Store, _: &Rowset, _: &mut ReduceContext| Err(ReduceError::Failed("boom".into())));
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store.clone(), reducer);
        let report = rt.step(|_, _| Some(response(&["a"], 0)));
        assert!(matches!(report.outcome, RoundOutcome::TransientError(_)));
        assert_eq!(store.commit_seq(), 0);
    }

    #[test]
    fn malformed_attachment_is_discarded() {
        let store = store();
        let mut rt = ReducerRuntime::new(ReducerConfig::new(0, 2, STATE), Guid(1), store.clone(), tally());
        let report = rt.step(|m, _| {
            Some(if m == 0 {
                Ok(GetRowsResponse { row_count: 1, last_shuffle_row_index: Some(3), attachment: vec![1, 2] })
            } else {
                response(&["z", "z"], 9)
            })
        });
        assert_eq!(report.outcome, RoundOutcome::Committed);
        assert_eq!(state(&store).committed_row_indices, vec![-1, 9]);
        assert_eq!(rt.stats().discarded_responses, 1);
        // row count that disagrees with the attachment is also dropped
        let report = rt.step(|m, _| Some(if m == 0 { Ok(GetRowsResponse { row_count: 2, ..response(&["q"], 4).unwrap() }) } else { Ok(GetRowsResponse::default()) }));
        assert_eq!(report.outcome, RoundOutcome::NothingToDo);
    }

    #[test]
    fn broken_orders_leave_a_window_between_halves() {
        for order in [CommitOrder::UserFirst, CommitOrder::MetaFirst] {
            let store = store();
            let mut config = ReducerConfig::new(0, 2, STATE);
            config.commit_order = order;
            let mut rt = ReducerRuntime::new(config, Guid(1), store.clone(), tally());
            let plan = rt.begin_round().unwrap();
            let mut responses = BTreeMap::new();
            responses.insert(0, response(&["a"], 0));
            assert_eq!(rt.finish_round(plan, responses).outcome, RoundOutcome::Deferred);
            match order {
                CommitOrder::UserFirst => {
                    assert_eq!(count(&store, "a"), Some(1));
                    assert_eq!(state(&store), ReducerState::initial(2));
                }
                _ => {
                    assert_eq!(count(&store, "a"), None);
                    assert_eq!(state(&store).committed_row_indices, vec![0, -1]);
                }
            }
            assert_eq!(rt.complete_deferred().unwrap(), RoundOutcome::Committed);
            assert_eq!(count(&store, "a"), Some(1));
            assert_eq!(state(&store).committed_row_indices, vec![0, -1]);
        }
    }
}
