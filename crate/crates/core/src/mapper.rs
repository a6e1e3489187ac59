//! Mapper worker.
//!
//! A mapper owns one input partition. Each ingestion step reads a batch,
//! maps it with the user function and appends the result to a rolling
//! window. Every mapped row gets a shuffle index and is queued in the bucket
//! of the reducer it was assigned to. Reducers pull from their bucket with
//! `GetRows` and acknowledge by sending the last shuffle index they have
//! committed. Once every bucket has moved past a window entry the entry is
//! dropped, the local state advances and a periodic transaction persists it
//! and trims the input.
//!
//! The runtime is a plain state machine. Whoever drives it (the simulator or
//! a live process) decides when to call [`MapperRuntime::ingestion_step`],
//! [`MapperRuntime::handle_get_rows`] and [`MapperRuntime::trim_input_rows`],
//! and must serialize those calls.

use std::collections::VecDeque;

use crate::control::Directive;
use crate::input::{ContinuationToken, PartitionReader};
use crate::row::{encode_rowset, NameTable, PartitionedRowset, Row, RowError, Rowset, RowsetBuilder, Value};
use crate::store::{CommitResult, SortedSchema, Store, StoreError};
use crate::transport::messages::{GetRowsError, GetRowsRequest, GetRowsResponse};
use crate::Guid;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapError {
    #[error("map failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapperError {
    #[error("state table unavailable: {0}")]
    StateUnavailable(StoreError),
    #[error("state row for mapper {index} is malformed: {detail}")]
    CorruptState { index: u32, detail: String },
    #[error("mapper has not been bootstrapped")]
    NotBootstrapped,
}

/// Side channel handed to [`Mapper::map`].
#[derive(Debug, Default)]
pub struct MapContext {
    directives: Vec<(usize, Directive)>,
}

impl MapContext {
    /// Records a control directive found at `row` of the input batch. The
    /// driver acts on it after the step completes.
    pub fn control(&mut self, row: usize, directive: Directive) {
        self.directives.push((row, directive));
    }
}

/// User map function. Must be deterministic: the same input batch always
/// yields the same output rows and partition assignment.
pub trait Mapper: Send {
    fn map(&mut self, input: &Rowset, ctx: &mut MapContext) -> Result<PartitionedRowset, MapError>;
}

impl<F> Mapper for F
where
    F: FnMut(&Rowset, &mut MapContext) -> Result<PartitionedRowset, MapError> + Send,
{
    fn map(&mut self, input: &Rowset, ctx: &mut MapContext) -> Result<PartitionedRowset, MapError> {
        self(input, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct MapperConfig {
    pub mapper_index: u32,
    pub reducer_count: u32,
    pub state_table: String,
    pub max_batch_rows: u64,
    pub memory_limit_bytes: u64,
    pub backoff_ms: u64,
    pub split_brain_delay_ms: u64,
    pub trim_period_ms: u64,
    /// Persist every mapped row into this sorted table before it enters the
    /// window. Only used to measure the cost of a store-and-forward shuffle.
    pub spill_table: Option<String>,
}

impl MapperConfig {
    pub fn new(mapper_index: u32, reducer_count: u32, state_table: impl Into<String>) -> Self {
        MapperConfig {
            mapper_index,
            reducer_count,
            state_table: state_table.into(),
            max_batch_rows: 1024,
            memory_limit_bytes: 64 << 20,
            backoff_ms: 100,
            split_brain_delay_ms: 5000,
            trim_period_ms: 2000,
            spill_table: None,
        }
    }
}

/// Persisted progress of one mapper: the first input row and the first
/// shuffle row not yet fully processed downstream, and the source position
/// matching the former.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapperState {
    pub input_unread_row_index: u64,
    pub shuffle_unread_row_index: u64,
    pub continuation_token: ContinuationToken,
}

impl MapperState {
    pub fn initial(token: ContinuationToken) -> Self {
        MapperState { input_unread_row_index: 0, shuffle_unread_row_index: 0, continuation_token: token }
    }

    pub fn to_row(&self, mapper_index: u32) -> Row {
        Row::new(vec![
            Value::Int64(mapper_index as i64),
            Value::Int64(self.input_unread_row_index as i64),
            Value::Int64(self.shuffle_unread_row_index as i64),
            Value::String(self.continuation_token.to_bytes()),
        ])
    }

    pub fn from_row(mapper_index: u32, row: &Row) -> Result<Self, MapperError> {
        let corrupt = |detail: &str| MapperError::CorruptState { index: mapper_index, detail: detail.to_string() };
        let input = row.get(1).as_i64().filter(|v| *v >= 0).ok_or_else(|| corrupt("input_unread_row_index"))?;
        let shuffle = row.get(2).as_i64().filter(|v| *v >= 0).ok_or_else(|| corrupt("shuffle_unread_row_index"))?;
        let token = row.get(3).as_bytes().ok_or_else(|| corrupt("continuation_token"))?;
        let token = ContinuationToken::from_bytes(token).map_err(|e| corrupt(&e.to_string()))?;
        Ok(MapperState { input_unread_row_index: input as u64, shuffle_unread_row_index: shuffle as u64, continuation_token: token })
    }

    fn covers(&self, other: &MapperState) -> bool {
        self.input_unread_row_index >= other.input_unread_row_index
            && self.shuffle_unread_row_index >= other.shuffle_unread_row_index
    }
}

pub fn mapper_state_schema() -> SortedSchema {
    let names = NameTable::from_names([
        "mapper_index",
        "input_unread_row_index",
        "shuffle_unread_row_index",
        "continuation_token",
    ])
    .expect("static names are unique");
    SortedSchema::new(names, 1)
}

pub fn spill_table_schema() -> SortedSchema {
    let names = NameTable::from_names(["mapper_index", "shuffle_row_index", "row"]).expect("static names are unique");
    SortedSchema::new(names, 2)
}

#[derive(Debug, Clone)]
pub struct WindowEntry {
    pub rowset: Rowset,
    pub partition_indexes: Vec<u32>,
    pub input_begin: u64,
    pub input_end: u64,
    pub shuffle_begin: u64,
    pub shuffle_end: u64,
    pub continuation_token: ContinuationToken,
    pub bucket_pointer_count: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BucketState {
    pub queue: VecDeque<u64>,
    /// Absolute window index of the entry holding `queue[0]`.
    pub first_window_entry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Appended { input_rows: u64, mapped_rows: u64, directives: Vec<(u64, Directive)> },
    Empty,
    SplitBrainRestart,
    TransientError(String),
    /// The window is over its memory budget; nothing was read.
    MemoryBlocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimOutcome {
    Advanced,
    NoProgress,
    SplitBrainDetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MapperStats {
    pub batches: u64,
    pub input_rows: u64,
    pub mapped_rows: u64,
    pub empty_reads: u64,
    pub transient_errors: u64,
    pub memory_blocked: u64,
    pub split_brains: u64,
    pub get_rows_served: u64,
    pub rows_served: u64,
    pub stale_requests: u64,
    pub state_commits: u64,
    pub reader_trims: u64,
    pub max_window_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    NeedsBootstrap,
    Running,
}

pub struct MapperRuntime {
    config: MapperConfig,
    id: Guid,
    store: Store,
    reader: Box<dyn PartitionReader>,
    mapper: Box<dyn Mapper>,
    phase: Phase,
    window: VecDeque<WindowEntry>,
    first_window_index: u64,
    buckets: Vec<BucketState>,
    local: Option<MapperState>,
    persisted: Option<MapperState>,
    input_cursor: u64,
    shuffle_cursor: u64,
    token_cursor: Option<ContinuationToken>,
    memory_usage: u64,
    last_reader_trim: Option<MapperState>,
    stats: MapperStats,
}

impl std::fmt::Debug for MapperRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MapperRuntime")
            .field("index", &self.config.mapper_index)
            .field("id", &self.id)
            .field("phase", &self.phase)
            .field("window", &self.window.len())
            .field("memory_usage", &self.memory_usage)
            .finish_non_exhaustive()
    }
}

impl MapperRuntime {
    pub fn new(config: MapperConfig, id: Guid, store: Store, reader: Box<dyn PartitionReader>, mapper: Box<dyn Mapper>) -> Self {
        let buckets = vec![BucketState::default(); config.reducer_count as usize];
        MapperRuntime {
            config,
            id,
            store,
            reader,
            mapper,
            phase: Phase::NeedsBootstrap,
            window: VecDeque::new(),
            first_window_index: 0,
            buckets,
            local: None,
            persisted: None,
            input_cursor: 0,
            shuffle_cursor: 0,
            token_cursor: None,
            memory_usage: 0,
            last_reader_trim: None,
            stats: MapperStats::default(),
        }
    }

    pub fn id(&self) -> Guid {
        self.id
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn stats(&self) -> MapperStats {
        self.stats
    }

    pub fn is_running(&self) -> bool {
        self.phase == Phase::Running
    }

    pub fn memory_usage(&self) -> u64 {
        self.memory_usage
    }

    pub fn window(&self) -> &VecDeque<WindowEntry> {
        &self.window
    }

    pub fn first_window_index(&self) -> u64 {
        self.first_window_index
    }

    pub fn buckets(&self) -> &[BucketState] {
        &self.buckets
    }

    pub fn local_state(&self) -> Option<&MapperState> {
        self.local.as_ref()
    }

    pub fn persisted_state(&self) -> Option<&MapperState> {
        self.persisted.as_ref()
    }

    /// Next input row index to be read.
    pub fn input_cursor(&self) -> u64 {
        self.input_cursor
    }

    pub fn shuffle_cursor(&self) -> u64 {
        self.shuffle_cursor
    }

    pub fn token_cursor(&self) -> Option<&ContinuationToken> {
        self.token_cursor.as_ref()
    }

    fn key(&self) -> [Value; 1] {
        [Value::Int64(self.config.mapper_index as i64)]
    }

    fn decode_state(&self, row: Option<Row>) -> Result<Option<MapperState>, MapperError> {
        row.map(|r| MapperState::from_row(self.config.mapper_index, &r)).transpose()
    }

    /// Loads (or creates) the persisted state and positions all cursors on
    /// it. Any previous in-memory state is discarded.
    pub fn bootstrap(&mut self) -> Result<(), MapperError> {
        self.drop_state();
        let table = self.config.state_table.clone();
        let mut tx = self.store.begin();
        let row = tx.read(&table, &self.key()).map_err(MapperError::StateUnavailable)?;
        let state = match self.decode_state(row)? {
            Some(state) => state,
            None => {
                let state = MapperState::initial(self.reader.initial_token());
                tx.write(&table, state.to_row(self.config.mapper_index)).map_err(MapperError::StateUnavailable)?;
                match tx.commit().map_err(MapperError::StateUnavailable)? {
                    CommitResult::Committed { .. } => state,
                    CommitResult::ConflictAbort => {
                        return Err(MapperError::StateUnavailable(StoreError::Unavailable));
                    }
                }
            }
        };
        self.input_cursor = state.input_unread_row_index;
        self.shuffle_cursor = state.shuffle_unread_row_index;
        self.token_cursor = Some(state.continuation_token.clone());
        self.first_window_index = 0;
        for b in &mut self.buckets {
            b.first_window_entry = 0;
        }
        self.local = Some(state.clone());
        self.persisted = Some(state);
        self.phase = Phase::Running;
        Ok(())
    }

    fn drop_state(&mut self) {
        self.phase = Phase::NeedsBootstrap;
        self.window.clear();
        self.buckets = vec![BucketState::default(); self.config.reducer_count as usize];
        self.memory_usage = 0;
        self.local = None;
        self.persisted = None;
        self.token_cursor = None;
    }

    fn remote_state(&self) -> Result<Option<MapperState>, String> {
        let row = self.store.fetch(&self.config.state_table, &self.key()).map_err(|e| e.to_string())?;
        self.decode_state(row).map_err(|e| e.to_string())
    }

    /// One pass of the ingestion loop. Waiting between passes is the
    /// driver's job: it should back off after any outcome other than
    /// [`StepOutcome::Appended`], and wait out the split-brain delay before
    /// bootstrapping again after [`StepOutcome::SplitBrainRestart`].
    pub fn ingestion_step(&mut self) -> Result<StepOutcome, MapperError> {
        if self.phase != Phase::Running {
            return Err(MapperError::NotBootstrapped);
        }
        if self.memory_usage > self.config.memory_limit_bytes {
            self.stats.memory_blocked += 1;
            return Ok(StepOutcome::MemoryBlocked);
        }
        let token = self.token_cursor.clone().expect("running mapper has a token");
        let read = self.reader.read(self.input_cursor, self.input_cursor + self.config.max_batch_rows, &token);

        let remote = match self.remote_state() {
            Ok(remote) => remote,
            Err(e) => return Ok(self.transient(e)),
        };
        if remote.as_ref() != self.persisted.as_ref() {
            // Another instance with our index has committed progress.
            self.stats.split_brains += 1;
            self.drop_state();
            return Ok(StepOutcome::SplitBrainRestart);
        }
        let read = match read {
            Ok(read) => read,
            Err(e) => return Ok(self.transient(e.to_string())),
        };
        if read.rowset.is_empty() {
            self.stats.empty_reads += 1;
            return Ok(StepOutcome::Empty);
        }

        let mut ctx = MapContext::default();
        let mapped = match self.mapper.map(&read.rowset, &mut ctx) {
            Ok(mapped) => mapped,
            Err(e) => return Ok(self.transient(e.to_string())),
        };
        if let Err(e) = mapped.validate(self.config.reducer_count) {
            return Ok(self.transient(e.to_string()));
        }
        if let Some(spill) = self.config.spill_table.clone() {
            if let Err(e) = self.spill(&spill, mapped.rowset()) {
                return Ok(self.transient(e.to_string()));
            }
        }

        let input_rows = read.rowset.len() as u64;
        let (rowset, partition_indexes) = mapped.into_parts();
        let mapped_rows = rowset.len() as u64;
        let bytes = encode_rowset(&rowset).len() as u64;
        let absolute = self.first_window_index + self.window.len() as u64;
        let mut entry = WindowEntry {
            rowset,
            partition_indexes,
            input_begin: self.input_cursor,
            input_end: self.input_cursor + input_rows,
            shuffle_begin: self.shuffle_cursor,
            shuffle_end: self.shuffle_cursor + mapped_rows,
            continuation_token: read.next_token.clone(),
            bucket_pointer_count: 0,
            bytes,
        };
        for (offset, &reducer) in entry.partition_indexes.iter().enumerate() {
            let bucket = &mut self.buckets[reducer as usize];
            if bucket.queue.is_empty() {
                bucket.first_window_entry = absolute;
                entry.bucket_pointer_count += 1;
            }
            bucket.queue.push_back(entry.shuffle_begin + offset as u64);
        }
        self.memory_usage += bytes;
        self.stats.max_window_bytes = self.stats.max_window_bytes.max(self.memory_usage);
        self.input_cursor = entry.input_end;
        self.shuffle_cursor = entry.shuffle_end;
        self.token_cursor = Some(read.next_token);
        let input_begin = entry.input_begin;
        self.window.push_back(entry);
        // A batch that mapped to nothing, or only to already-drained buckets,
        // is immediately trimmable.
        self.trim_window_entries();

        self.stats.batches += 1;
        self.stats.input_rows += input_rows;
        self.stats.mapped_rows += mapped_rows;
        let directives = ctx.directives.into_iter().map(|(row, d)| (input_begin + row as u64, d)).collect();
        Ok(StepOutcome::Appended { input_rows, mapped_rows, directives })
    }

    fn transient(&mut self, reason: String) -> StepOutcome {
        self.stats.transient_errors += 1;
        tracing::debug!(mapper = self.config.mapper_index, %reason, "ingestion step failed");
        StepOutcome::TransientError(reason)
    }

    fn spill(&self, table: &str, rowset: &Rowset) -> Result<(), StoreError> {
        let mut tx = self.store.begin();
        let names = rowset.name_table().clone();
        for (i, row) in rowset.rows().iter().enumerate() {
            let single = Rowset::new(names.clone(), vec![row.clone()]).expect("row came from a valid rowset");
            tx.write(
                table,
                Row::new(vec![
                    Value::Int64(self.config.mapper_index as i64),
                    Value::Int64((self.shuffle_cursor + i as u64) as i64),
                    Value::String(encode_rowset(&single)),
                ]),
            )?;
        }
        match tx.commit()? {
            CommitResult::Committed { .. } => Ok(()),
            CommitResult::ConflictAbort => Err(StoreError::Unavailable),
        }
    }

    /// Position of the window entry holding shuffle row `index`.
    fn entry_position(&self, index: u64) -> usize {
        self.window.partition_point(|e| e.shuffle_end <= index)
    }

    /// Serves a reducer's pull. Rows up to `committed_row_index` are first
    /// released from the bucket; up to `count` of the remaining ones are
    /// returned but stay queued until a later call acknowledges them.
    pub fn handle_get_rows(&mut self, request: &GetRowsRequest) -> Result<GetRowsResponse, GetRowsError> {
        if request.mapper_id != self.id {
            self.stats.stale_requests += 1;
            return Err(GetRowsError::StaleMapperId { requested: request.mapper_id, actual: self.id });
        }
        if request.reducer_index < 0 || request.reducer_index >= self.config.reducer_count as i64 {
            return Err(GetRowsError::BadReducerIndex(request.reducer_index));
        }
        self.stats.get_rows_served += 1;
        if self.phase != Phase::Running {
            return Ok(GetRowsResponse::default());
        }
        let r = request.reducer_index as usize;

        let old_head = self.buckets[r].first_window_entry;
        let mut popped = false;
        while let Some(&head) = self.buckets[r].queue.front() {
            if (head as i64) > request.committed_row_index {
                break;
            }
            self.buckets[r].queue.pop_front();
            popped = true;
        }
        if popped {
            let old_pos = (old_head - self.first_window_index) as usize;
            self.window[old_pos].bucket_pointer_count -= 1;
            if let Some(&head) = self.buckets[r].queue.front() {
                let pos = self.entry_position(head);
                self.window[pos].bucket_pointer_count += 1;
                self.buckets[r].first_window_entry = self.first_window_index + pos as u64;
            }
            if self.window[old_pos].bucket_pointer_count == 0 {
                self.trim_window_entries();
            }
        }

        let count = request.count.max(0) as usize;
        let serve: Vec<u64> = self.buckets[r].queue.iter().take(count).copied().collect();
        let Some(&last) = serve.last() else {
            return Ok(GetRowsResponse::default());
        };
        let mut builder = RowsetBuilder::new();
        let mut i = 0;
        while i < serve.len() {
            let pos = self.entry_position(serve[i]);
            let entry = &self.window[pos];
            let mut offsets = Vec::new();
            while i < serve.len() && serve[i] < entry.shuffle_end {
                offsets.push((serve[i] - entry.shuffle_begin) as usize);
                i += 1;
            }
            builder.extend_from(&entry.rowset, offsets);
        }
        self.stats.rows_served += serve.len() as u64;
        Ok(GetRowsResponse {
            row_count: serve.len() as i64,
            last_shuffle_row_index: Some(last as i64),
            attachment: encode_rowset(&builder.finish()),
        })
    }

    /// Drops fully consumed entries from the front of the window and moves
    /// the local state to the end of the last one dropped.
    pub fn trim_window_entries(&mut self) {
        let mut last = None;
        while self.window.front().is_some_and(|e| e.bucket_pointer_count == 0) {
            let entry = self.window.pop_front().expect("front exists");
            self.first_window_index += 1;
            self.memory_usage -= entry.bytes;
            last = Some(entry);
        }
        if let Some(entry) = last {
            self.local = Some(MapperState {
                input_unread_row_index: entry.input_end,
                shuffle_unread_row_index: entry.shuffle_end,
                continuation_token: entry.continuation_token,
            });
        }
    }

    /// Periodic persistence of the local state followed by an input trim.
    pub fn trim_input_rows(&mut self) -> TrimOutcome {
        if self.phase != Phase::Running {
            return TrimOutcome::NoProgress;
        }
        let table = self.config.state_table.clone();
        let mut tx = self.store.begin();
        let remote = match tx.read(&table, &self.key()) {
            Ok(row) => match self.decode_state(row) {
                Ok(state) => state,
                Err(_) => return TrimOutcome::NoProgress,
            },
            Err(_) => return TrimOutcome::NoProgress,
        };
        if remote.as_ref() != self.persisted.as_ref() {
            tx.abort();
            self.stats.split_brains += 1;
            self.drop_state();
            return TrimOutcome::SplitBrainDetected;
        }
        let local = self.local.clone().expect("running mapper has local state");
        let persisted = self.persisted.clone().expect("running mapper has persisted state");
        if local == persisted || !local.covers(&persisted) {
            tx.abort();
            // A predecessor may have persisted this state and died before
            // its trim took effect.
            if self.last_reader_trim.as_ref() != Some(&persisted) {
                self.issue_reader_trim(&persisted);
            }
            return TrimOutcome::NoProgress;
        }
        if tx.write(&table, local.to_row(self.config.mapper_index)).is_err() {
            return TrimOutcome::NoProgress;
        }
        match tx.commit() {
            Ok(CommitResult::Committed { .. }) => {
                self.stats.state_commits += 1;
                self.persisted = Some(local.clone());
                self.issue_reader_trim(&local);
                TrimOutcome::Advanced
            }
            Ok(CommitResult::ConflictAbort) | Err(_) => TrimOutcome::NoProgress,
        }
    }

    fn issue_reader_trim(&mut self, state: &MapperState) {
        match self.reader.trim(state.input_unread_row_index, &state.continuation_token) {
            Ok(()) => {
                self.stats.reader_trims += 1;
                self.last_reader_trim = Some(state.clone());
            }
            Err(e) => tracing::debug!(mapper = self.config.mapper_index, "reader trim failed: {e}"),
        }
    }

    /// Checks the structural invariants of the window and buckets.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.phase != Phase::Running {
            return Ok(());
        }
        let local = self.local.as_ref().expect("running");
        let persisted = self.persisted.as_ref().expect("running");
        if !local.covers(persisted) {
            return Err(format!("local state {local:?} behind persisted {persisted:?}"));
        }
        let mut counts = vec![0u32; self.window.len()];
        for (r, b) in self.buckets.iter().enumerate() {
            if !b.queue.iter().zip(b.queue.iter().skip(1)).all(|(a, b)| a < b) {
                return Err(format!("bucket {r} not strictly increasing"));
            }
            if let Some(&head) = b.queue.front() {
                if head < local.shuffle_unread_row_index || head >= self.shuffle_cursor {
                    return Err(format!("bucket {r} head {head} outside window"));
                }
                let pos = self.entry_position(head);
                if b.first_window_entry != self.first_window_index + pos as u64 {
                    return Err(format!("bucket {r} points at the wrong entry"));
                }
                counts[pos] += 1;
            }
        }
        let mut bytes = 0;
        for (pos, e) in self.window.iter().enumerate() {
            if e.shuffle_end - e.shuffle_begin != e.rowset.len() as u64 {
                return Err(format!("entry {pos} range does not match its rows"));
            }
            if e.bucket_pointer_count != counts[pos] {
                return Err(format!("entry {pos} count {} but {} buckets point at it", e.bucket_pointer_count, counts[pos]));
            }
            bytes += e.bytes;
        }
        if bytes != self.memory_usage {
            return Err(format!("memory usage {} but entries hold {bytes}", self.memory_usage));
        }
        Ok(())
    }
}

/// Builds a [`PartitionedRowset`] by hashing key columns; the usual shape
/// of a map function's tail.
pub fn partition_by_hash(rowset: Rowset, keys: &[&str], reducer_count: u32) -> Result<PartitionedRowset, RowError> {
    if reducer_count == 0 {
        return Err(RowError::ZeroReducers);
    }
    let partitioner = crate::row::HashPartitioner::new(rowset.name_table(), keys)?;
    let indexes = rowset.rows().iter().map(|row| partitioner.partition(row, reducer_count)).collect();
    PartitionedRowset::new(rowset, indexes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::IndexPartitionReader;
    use crate::row::decode_rowset;

    const INPUT: &str = "input";
    const STATE: &str = "mapper_state";

    fn names() -> NameTable {
        NameTable::from_names(["v"]).unwrap()
    }

    fn store_with_input(values: std::ops::Range<i64>) -> Store {
        let store = Store::new();
        store.create_ordered_table(INPUT, names()).unwrap();
        store.create_sorted_table(STATE, mapper_state_schema()).unwrap();
        append(&store, values);
        store
    }

    fn append(store: &Store, values: std::ops::Range<i64>) {
        let rows = values.map(|v| Row::new(vec![Value::Int64(v)])).collect();
        store.append_rows(INPUT, &Rowset::new(names(), rows).unwrap()).unwrap();
    }

    /// Emits one row per input row, routed by `v % reducers`; values
    /// divisible by 10 additionally emit a copy for reducer 0.
    fn modulo_mapper(reducers: u32) -> Box<dyn Mapper> {
        Box::new(move |input: &Rowset, _: &mut MapContext| {
            let mut rows = Vec::new();
            let mut parts = Vec::new();
            for row in input.rows() {
                let v = row.get(0).as_i64().unwrap();
                rows.push(row.clone());
                parts.push((v as u32) % reducers);
                if v % 10 == 0 {
                    rows.push(row.clone());
                    parts.push(0);
                }
            }
            Ok(PartitionedRowset::new(Rowset::new(input.name_table().clone(), rows).unwrap(), parts).unwrap())
        })
    }

    fn runtime(store: &Store, reducers: u32, batch: u64, mapper: Box<dyn Mapper>) -> MapperRuntime {
        let mut config = MapperConfig::new(0, reducers, STATE);
        config.max_batch_rows = batch;
        let reader = IndexPartitionReader::new(store.clone(), INPUT).unwrap();
        let mut rt = MapperRuntime::new(config, Guid(1), store.clone(), Box::new(reader), mapper);
        rt.bootstrap().unwrap();
        rt
    }

    fn get(rt: &mut MapperRuntime, reducer: i64, count: i64, committed: i64) -> (Vec<i64>, Option<i64>) {
        let rsp = rt
            .handle_get_rows(&GetRowsRequest { count, reducer_index: reducer, committed_row_index: committed, mapper_id: rt.id() })
            .unwrap();
        let values = if rsp.row_count == 0 {
            vec![]
        } else {
            decode_rowset(&rsp.attachment).unwrap().rows().iter().map(|r| r.get(0).as_i64().unwrap()).collect()
        };
        assert_eq!(values.len() as i64, rsp.row_count);
        (values, rsp.last_shuffle_row_index)
    }

    #[test]
    fn bootstrap_creates_and_loads_state() {
        let store = store_with_input(0..0);
        let rt = runtime(&store, 1, 8, modulo_mapper(1));
        assert_eq!(rt.input_cursor(), 0);
        assert_eq!(rt.shuffle_cursor(), 0);
        assert_eq!(rt.token_cursor(), Some(&ContinuationToken::Index(0)));

        let state = MapperState { input_unread_row_index: 100, shuffle_unread_row_index: 250, continuation_token: ContinuationToken::Index(100) };
        let mut tx = store.begin();
        tx.write(STATE, state.to_row(0)).unwrap();
        tx.commit().unwrap();
        let rt = runtime(&store, 1, 8, modulo_mapper(1));
        assert_eq!((rt.input_cursor(), rt.shuffle_cursor()), (100, 250));
        assert_eq!(rt.local_state(), Some(&state));
    }

    #[test]
    fn empty_source_yields_empty() {
        let store = store_with_input(0..0);
        let mut rt = runtime(&store, 2, 8, modulo_mapper(2));
        assert_eq!(rt.ingestion_step().unwrap(), StepOutcome::Empty);
        assert!(rt.window().is_empty());
    }

    #[test]
    fn two_inputs_three_outputs_point_two_buckets_at_one_entry() {
        let store = store_with_input(0..0);
        let mapper: Box<dyn Mapper> = Box::new(|input: &Rowset, _: &mut MapContext| {
            let rows = vec![input.rows()[0].clone(), input.rows()[1].clone(), input.rows()[1].clone()];
            Ok(PartitionedRowset::new(Rowset::new(input.name_table().clone(), rows).unwrap(), vec![0, 1, 0]).unwrap())
        });
        let mut rt = runtime(&store, 2, 8, mapper);
        append(&store, 1..3);
        let out = rt.ingestion_step().unwrap();
        assert_eq!(out, StepOutcome::Appended { input_rows: 2, mapped_rows: 3, directives: vec![] });
        assert_eq!(rt.window().len(), 1);
        assert_eq!(rt.buckets()[0].queue, VecDeque::from([0, 2]));
        assert_eq!(rt.buckets()[1].queue, VecDeque::from([1]));
        assert_eq!(rt.window()[0].bucket_pointer_count, 2);
        rt.check_invariants().unwrap();
    }

    /// Hand-built window: one entry whose rows land in buckets so that
    /// bucket 0 holds shuffle indexes [5, 7, 8].
    fn window_with_bucket_5_7_8() -> MapperRuntime {
        let store = store_with_input(0..0);
        let mut state = MapperState::initial(ContinuationToken::Index(0));
        state.shuffle_unread_row_index = 5;
        let mut tx = store.begin();
        tx.write(STATE, state.to_row(0)).unwrap();
        tx.commit().unwrap();
        let mapper: Box<dyn Mapper> = Box::new(|input: &Rowset, _: &mut MapContext| {
            // rows 105..109 -> shuffle 5..9, reducers [0, 1, 0, 0, 1]
            Ok(PartitionedRowset::new(input.clone(), vec![0, 1, 0, 0, 1]).unwrap())
        });
        let mut rt = runtime(&store, 2, 8, mapper);
        append(&store, 105..110);
        assert!(matches!(rt.ingestion_step().unwrap(), StepOutcome::Appended { .. }));
        assert_eq!(rt.buckets()[0].queue, VecDeque::from([5, 7, 8]));
        rt
    }

    #[test]
    fn get_rows_pops_committed_then_serves_without_removing() {
        let mut rt = window_with_bucket_5_7_8();
        let first = get(&mut rt, 0, 2, 5);
        assert_eq!(first, (vec![107, 108], Some(8)));
        assert_eq!(rt.buckets()[0].queue, VecDeque::from([7, 8]));
        assert_eq!(get(&mut rt, 0, 2, 5), first);
        rt.check_invariants().unwrap();
        // Acknowledging everything drains the bucket; bucket 1 still pins
        // the entry.
        assert_eq!(get(&mut rt, 0, 2, 8), (vec![], None));
        assert_eq!(rt.window().len(), 1);
        assert_eq!(get(&mut rt, 1, 10, 9), (vec![], None));
        assert!(rt.window().is_empty());
        assert_eq!(rt.local_state().unwrap().shuffle_unread_row_index, 10);
        rt.check_invariants().unwrap();
    }

    #[test]
    fn get_rows_with_stale_id_changes_nothing() {
        let mut rt = window_with_bucket_5_7_8();
        let err = rt
            .handle_get_rows(&GetRowsRequest { count: 2, reducer_index: 0, committed_row_index: 8, mapper_id: Guid(99) })
            .unwrap_err();
        assert!(matches!(err, GetRowsError::StaleMapperId { .. }));
        assert_eq!(rt.buckets()[0].queue.len(), 3);
        assert!(rt.handle_get_rows(&GetRowsRequest { count: 1, reducer_index: 5, committed_row_index: -1, mapper_id: Guid(1) }).is_err());
    }

    #[test]
    fn empty_bucket_serves_nothing() {
        let store = store_with_input(0..0);
        let mut rt = runtime(&store, 2, 8, modulo_mapper(2));
        assert_eq!(get(&mut rt, 1, 10, -1), (vec![], None));
    }

    #[test]
    fn trim_window_pops_leading_zero_entries() {
        let store = store_with_input(0..0);
        // batch size 1: entry k holds input row k; rows 0, 1 go to reducer 0
        // and row 2 to both reducers.
        let mapper: Box<dyn Mapper> = Box::new(|input: &Rowset, _: &mut MapContext| {
            let v = input.rows()[0].get(0).as_i64().unwrap();
            if v < 2 {
                Ok(PartitionedRowset::new(input.clone(), vec![0]).unwrap())
            } else {
                let rows = vec![input.rows()[0].clone(), input.rows()[0].clone()];
                Ok(PartitionedRowset::new(Rowset::new(input.name_table().clone(), rows).unwrap(), vec![0, 1]).unwrap())
            }
        });
        let mut rt = runtime(&store, 2, 1, mapper);
        append(&store, 0..3);
        for _ in 0..3 {
            assert!(matches!(rt.ingestion_step().unwrap(), StepOutcome::Appended { .. }));
        }
        let counts: Vec<u32> = rt.window().iter().map(|e| e.bucket_pointer_count).collect();
        assert_eq!(counts, vec![1, 0, 1]);
        // Reducer 0 commits shuffle rows 0 and 1; its head moves into entry
        // 2, leaving counts [0, 0, 2].
        get(&mut rt, 0, 0, 1);
        assert_eq!(rt.window().len(), 1);
        assert_eq!(rt.window()[0].bucket_pointer_count, 2);
        assert_eq!(rt.first_window_index(), 2);
        let local = rt.local_state().unwrap();
        assert_eq!((local.input_unread_row_index, local.shuffle_unread_row_index), (2, 2));
        assert_eq!(local.continuation_token, ContinuationToken::Index(2));
        rt.check_invariants().unwrap();
        // Front entry with a non-zero count stays.
        rt.trim_window_entries();
        assert_eq!(rt.window().len(), 1);
        get(&mut rt, 0, 0, 3);
        get(&mut rt, 1, 0, 3);
        assert!(rt.window().is_empty());
        assert_eq!(rt.local_state().unwrap().shuffle_unread_row_index, 4);
        assert_eq!(rt.memory_usage(), 0);
    }

    #[test]
    fn zero_row_batches_advance_through_trimming() {
        let store = store_with_input(0..5);
        let mapper: Box<dyn Mapper> =
            Box::new(|input: &Rowset, _: &mut MapContext| Ok(PartitionedRowset::new(Rowset::empty(input.name_table().clone()), vec![]).unwrap()));
        let mut rt = runtime(&store, 2, 8, mapper);
        assert!(matches!(rt.ingestion_step().unwrap(), StepOutcome::Appended { mapped_rows: 0, .. }));
        assert!(rt.window().is_empty());
        assert_eq!(rt.local_state().unwrap().input_unread_row_index, 5);
        assert_eq!(rt.trim_input_rows(), TrimOutcome::Advanced);
        assert_eq!(store.ordered_bounds(INPUT).unwrap(), (5, 5));
    }

    #[test]
    fn trim_input_rows_persists_and_trims_source() {
        let store = store_with_input(0..6);
        let mut rt = runtime(&store, 2, 4, modulo_mapper(2));
        assert_eq!(rt.trim_input_rows(), TrimOutcome::NoProgress);
        rt.ingestion_step().unwrap();
        rt.ingestion_step().unwrap();
        assert_eq!(rt.input_cursor(), 6);
        // Both reducers acknowledge the first batch (input 0..4, which maps
        // to shuffle 0..5 since row 0 is duplicated).
        get(&mut rt, 0, 0, 4);
        get(&mut rt, 1, 0, 4);
        assert_eq!(rt.trim_input_rows(), TrimOutcome::Advanced);
        let persisted = MapperState::from_row(0, &store.get(STATE, &[Value::Int64(0)]).unwrap().unwrap()).unwrap();
        assert_eq!(persisted.input_unread_row_index, 4);
        assert_eq!(persisted.shuffle_unread_row_index, 5);
        assert_eq!(store.ordered_bounds(INPUT).unwrap().0, 4);
        assert_eq!(rt.trim_input_rows(), TrimOutcome::NoProgress);

        // A restarted mapper re-reads from the persisted position and
        // assigns the same indexes to the same rows.
        let before: Vec<(u64, Vec<i64>)> = rt.window().iter().map(|e| (e.shuffle_begin, e.rowset.rows().iter().map(|r| r.get(0).as_i64().unwrap()).collect())).collect();
        let mut again = runtime(&store, 2, 4, modulo_mapper(2));
        again.ingestion_step().unwrap();
        let after: Vec<(u64, Vec<i64>)> = again.window().iter().map(|e| (e.shuffle_begin, e.rowset.rows().iter().map(|r| r.get(0).as_i64().unwrap()).collect())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn impostor_progress_is_detected() {
        let store = store_with_input(0..4);
        let mut rt = runtime(&store, 1, 4, modulo_mapper(1));
        let mut impostor = runtime(&store, 1, 4, modulo_mapper(1));
        impostor.ingestion_step().unwrap();
        get(&mut impostor, 0, 0, 10);
        assert_eq!(impostor.trim_input_rows(), TrimOutcome::Advanced);

        let trims_before = rt.stats().reader_trims;
        assert_eq!(rt.trim_input_rows(), TrimOutcome::SplitBrainDetected);
        assert_eq!(rt.stats().reader_trims, trims_before);
        assert!(!rt.is_running());
        rt.bootstrap().unwrap();
        assert_eq!(rt.input_cursor(), 4);

        let mut other = runtime(&store, 1, 4, modulo_mapper(1));
        append(&store, 4..8);
        rt.ingestion_step().unwrap();
        get(&mut rt, 0, 0, 100);
        assert_eq!(rt.trim_input_rows(), TrimOutcome::Advanced);
        assert_eq!(other.ingestion_step().unwrap(), StepOutcome::SplitBrainRestart);
        assert!(other.window().is_empty());
    }

    #[test]
    fn memory_limit_blocks_ingestion_until_trimmed() {
        let store = store_with_input(0..20);
        let mut rt = runtime(&store, 1, 4, modulo_mapper(1));
        rt.config.memory_limit_bytes = 1;
        assert!(matches!(rt.ingestion_step().unwrap(), StepOutcome::Appended { .. }));
        assert_eq!(rt.ingestion_step().unwrap(), StepOutcome::MemoryBlocked);
        // serving still works while blocked
        let (rows, last) = get(&mut rt, 0, 100, -1);
        assert_eq!(rows.len(), 5);
        get(&mut rt, 0, 0, last.unwrap());
        assert_eq!(rt.memory_usage(), 0);
        assert!(matches!(rt.ingestion_step().unwrap(), StepOutcome::Appended { .. }));
    }

    #[test]
    fn spill_mode_writes_every_mapped_row() {
        let store = store_with_input(0..3);
        store.create_sorted_table("spill", spill_table_schema()).unwrap();
        let mut config = MapperConfig::new(0, 1, STATE);
        config.spill_table = Some("spill".into());
        let reader = IndexPartitionReader::new(store.clone(), INPUT).unwrap();
        let mut rt = MapperRuntime::new(config, Guid(1), store.clone(), Box::new(reader), modulo_mapper(1));
        rt.bootstrap().unwrap();
        rt.ingestion_step().unwrap();
        assert_eq!(store.dump_sorted("spill").unwrap().len(), 4);
    }

    #[test]
    fn directives_report_absolute_input_rows() {
        let store = store_with_input(0..0);
        let mapper: Box<dyn Mapper> = Box::new(|input: &Rowset, ctx: &mut MapContext| {
            ctx.control(1, Directive::Crash);
            Ok(PartitionedRowset::new(input.clone(), vec![0; input.len()]).unwrap())
        });
        let mut rt = runtime(&store, 1, 8, mapper);
        append(&store, 0..3);
        match rt.ingestion_step().unwrap() {
            StepOutcome::Appended { directives, .. } => assert_eq!(directives, vec![(1, Directive::Crash)]),
            other => panic!("{other:?}"),
        }
    }
}
