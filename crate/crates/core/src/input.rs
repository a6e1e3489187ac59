//! Input partitions and the readers mappers use to consume them.
//!
//! A [`PartitionReader`] returns batches in a deterministic order starting at
//! the position a [`ContinuationToken`] denotes; the same token always yields
//! the same rows. Two sources are provided:
//!
//! * [`IndexPartitionReader`] over an ordered store table, where the token is
//!   simply the next absolute row index;
//! * [`OffsetPartitionReader`] over an [`OffsetLog`], a partition split into
//!   sub-streams whose offsets grow monotonically but with gaps. The token
//!   carries the next offset for every sub-stream.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::row::{ByteReader, NameTable, Row, Rowset};
use crate::store::{Store, StoreError};
use crate::Clock;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InputError {
    #[error("invalid continuation token: {0}")]
    InvalidToken(String),
    #[error("input source unavailable")]
    SourceUnavailable,
    #[error("position {position} is below the trim mark {trimmed_up_to}")]
    Trimmed { position: u64, trimmed_up_to: u64 },
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for InputError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::TrimmedRange { begin, trimmed_up_to, .. } => {
                InputError::Trimmed { position: begin, trimmed_up_to }
            }
            StoreError::Unavailable => InputError::SourceUnavailable,
            other => InputError::Store(other),
        }
    }
}

const TOKEN_INDEX: u8 = 0;
const TOKEN_OFFSETS: u8 = 1;

/// Source-specific stream position.
///
/// Wire form: `u8` kind tag, then `u64` (index source) or `u32` count plus
/// one `u64` per sub-stream (offset source), little-endian.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ContinuationToken {
    Index(u64),
    Offsets(Vec<u64>),
}

impl ContinuationToken {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ContinuationToken::Index(i) => {
                out.push(TOKEN_INDEX);
                out.extend_from_slice(&i.to_le_bytes());
            }
            ContinuationToken::Offsets(offsets) => {
                out.push(TOKEN_OFFSETS);
                out.extend_from_slice(&(offsets.len() as u32).to_le_bytes());
                for o in offsets {
                    out.extend_from_slice(&o.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InputError> {
        let bad = |e: crate::row::RowError| InputError::InvalidToken(e.to_string());
        let mut r = ByteReader::new(bytes);
        let token = match r.u8().map_err(bad)? {
            TOKEN_INDEX => ContinuationToken::Index(r.u64().map_err(bad)?),
            TOKEN_OFFSETS => {
                let n = r.u32().map_err(bad)? as usize;
                if n > r.remaining() / 8 {
                    return Err(InputError::InvalidToken(format!("{n} offsets overrun buffer")));
                }
                let offsets = (0..n).map(|_| r.u64()).collect::<Result<_, _>>().map_err(bad)?;
                ContinuationToken::Offsets(offsets)
            }
            tag => return Err(InputError::InvalidToken(format!("unknown token kind {tag}"))),
        };
        if r.remaining() != 0 {
            return Err(InputError::InvalidToken("trailing bytes".into()));
        }
        Ok(token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub rowset: Rowset,
    pub next_token: ContinuationToken,
}

/// Reader over one input partition.
///
/// `read` returns at most `end_row_index - begin_row_index` rows starting at
/// `token`; the caller numbers them from `begin_row_index`. `trim` marks
/// everything before `token` as consumed; it is idempotent and may take
/// effect later.
pub trait PartitionReader: Send {
    fn read(
        &mut self,
        begin_row_index: u64,
        end_row_index: u64,
        token: &ContinuationToken,
    ) -> Result<ReadResult, InputError>;

    fn trim(&mut self, row_index: u64, token: &ContinuationToken) -> Result<(), InputError>;

    fn initial_token(&self) -> ContinuationToken;
}

/// Trims queued for later application.
struct DeferredTrims<T> {
    delay_ms: u64,
    clock: Option<Arc<dyn Clock>>,
    pending: VecDeque<(u64, T)>,
}

impl<T> DeferredTrims<T> {
    fn immediate() -> Self {
        DeferredTrims { delay_ms: 0, clock: None, pending: VecDeque::new() }
    }

    fn delayed(delay_ms: u64, clock: Arc<dyn Clock>) -> Self {
        DeferredTrims { delay_ms, clock: Some(clock), pending: VecDeque::new() }
    }

    /// Returns the trim to run now, if it should not be deferred.
    fn submit(&mut self, trim: T) -> Option<T> {
        match &self.clock {
            Some(clock) if self.delay_ms > 0 => {
                self.pending.push_back((clock.now_ms() + self.delay_ms, trim));
                None
            }
            _ => Some(trim),
        }
    }

    fn take_due(&mut self) -> Vec<T> {
        let Some(clock) = &self.clock else { return Vec::new() };
        let now = clock.now_ms();
        let mut due = Vec::new();
        while self.pending.front().is_some_and(|(at, _)| *at <= now) {
            due.push(self.pending.pop_front().unwrap().1);
        }
        due
    }
}

/// Reads an ordered store table by absolute row index.
pub struct IndexPartitionReader {
    store: Store,
    table: String,
    trims: DeferredTrims<u64>,
}

impl IndexPartitionReader {
    pub fn new(store: Store, table: &str) -> Result<Self, InputError> {
        store.ordered_bounds(table)?;
        Ok(IndexPartitionReader { store, table: table.to_string(), trims: DeferredTrims::immediate() })
    }

    /// Applies trims `delay_ms` after they are requested, as measured by
    /// `clock`. Due trims are applied on the next reader call.
    pub fn with_trim_delay(mut self, delay_ms: u64, clock: Arc<dyn Clock>) -> Self {
        self.trims = DeferredTrims::delayed(delay_ms, clock);
        self
    }

    pub fn pending_trims(&self) -> usize {
        self.trims.pending.len()
    }

    fn apply_due(&mut self) -> Result<(), InputError> {
        for up_to in self.trims.take_due() {
            self.store.trim_table(&self.table, up_to)?;
        }
        Ok(())
    }

    fn position(token: &ContinuationToken) -> Result<u64, InputError> {
        match token {
            ContinuationToken::Index(i) => Ok(*i),
            other => Err(InputError::InvalidToken(format!("index source given {other:?}"))),
        }
    }
}

impl PartitionReader for IndexPartitionReader {
    fn read(&mut self, begin: u64, end: u64, token: &ContinuationToken) -> Result<ReadResult, InputError> {
        let pos = Self::position(token)?;
        if begin > end {
            return Err(InputError::Store(StoreError::InvalidRange { begin, end }));
        }
        self.apply_due()?;
        let rowset = self.store.read_range(&self.table, pos, pos + (end - begin))?;
        let next_token = ContinuationToken::Index(pos + rowset.len() as u64);
        Ok(ReadResult { rowset, next_token })
    }

    // The token is authoritative; `row_index` is only advisory here.
    fn trim(&mut self, _row_index: u64, token: &ContinuationToken) -> Result<(), InputError> {
        let pos = Self::position(token)?;
        self.apply_due()?;
        if let Some(up_to) = self.trims.submit(pos) {
            self.store.trim_table(&self.table, up_to)?;
        }
        Ok(())
    }

    fn initial_token(&self) -> ContinuationToken {
        let (trimmed, _) = self.store.ordered_bounds(&self.table).expect("table checked at construction");
        ContinuationToken::Index(trimmed)
    }
}

struct SubStream {
    entries: VecDeque<(u64, Row)>,
    trimmed_before: u64,
}

struct OffsetLogInner {
    names: NameTable,
    substreams: Vec<SubStream>,
    next_offset: u64,
    appended: u64,
    rng: ChaCha8Rng,
}

/// A partition made of several sub-streams sharing one offset sequence.
///
/// Every appended row gets an offset strictly above all earlier offsets in
/// the partition, skipping randomly by 1 to 3. Merging sub-streams by offset
/// is therefore stable under concurrent appends: new rows always sort after
/// everything already readable.
#[derive(Clone)]
pub struct OffsetLog {
    inner: Arc<Mutex<OffsetLogInner>>,
}

impl OffsetLog {
    pub fn new(names: NameTable, substreams: usize, seed: u64) -> Self {
        assert!(substreams >= 1, "an offset log needs at least one sub-stream");
        OffsetLog {
            inner: Arc::new(Mutex::new(OffsetLogInner {
                names,
                substreams: (0..substreams)
                    .map(|_| SubStream { entries: VecDeque::new(), trimmed_before: 0 })
                    .collect(),
                next_offset: 0,
                appended: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, OffsetLogInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn substreams(&self) -> usize {
        self.lock().substreams.len()
    }

    pub fn names(&self) -> NameTable {
        self.lock().names.clone()
    }

    /// Appends rows to `substream`, returning the assigned offsets.
    pub fn append(&self, substream: usize, rowset: &Rowset) -> Result<Vec<u64>, InputError> {
        let mut inner = self.lock();
        check_names(&inner.names, rowset)?;
        let mut offsets = Vec::with_capacity(rowset.len());
        for row in rowset.rows() {
            let skip = inner.rng.gen_range(1..=3);
            let offset = inner.next_offset + skip - 1;
            inner.next_offset = offset + 1;
            inner.appended += 1;
            inner.substreams[substream].entries.push_back((offset, row.clone()));
            offsets.push(offset);
        }
        Ok(offsets)
    }

    /// Appends one row at an explicit offset, which must exceed every offset
    /// already in the log.
    pub fn append_at(&self, substream: usize, offset: u64, row: Row) -> Result<(), InputError> {
        let mut inner = self.lock();
        if offset < inner.next_offset {
            return Err(InputError::InvalidToken(format!(
                "offset {offset} is not above the log head {}",
                inner.next_offset
            )));
        }
        inner.next_offset = offset + 1;
        inner.appended += 1;
        inner.substreams[substream].entries.push_back((offset, row));
        Ok(())
    }

    /// Total rows ever appended, trimmed or not.
    pub fn appended(&self) -> u64 {
        self.lock().appended
    }

    /// Rows still retained across all sub-streams.
    pub fn retained(&self) -> usize {
        self.lock().substreams.iter().map(|s| s.entries.len()).sum()
    }

    /// Token pointing past the last appended row.
    pub fn end_token(&self) -> ContinuationToken {
        let inner = self.lock();
        ContinuationToken::Offsets(
            inner
                .substreams
                .iter()
                .map(|s| s.entries.back().map_or(s.trimmed_before, |(o, _)| o + 1).max(s.trimmed_before))
                .collect(),
        )
    }

    fn trim_to(&self, positions: &[u64]) {
        let mut inner = self.lock();
        for (s, &pos) in inner.substreams.iter_mut().zip(positions) {
            if pos > s.trimmed_before {
                s.trimmed_before = pos;
                while s.entries.front().is_some_and(|(o, _)| *o < pos) {
                    s.entries.pop_front();
                }
            }
        }
    }
}

fn check_names(expected: &NameTable, rowset: &Rowset) -> Result<(), InputError> {
    if !rowset.is_empty() && rowset.name_table() != expected {
        return Err(InputError::Store(StoreError::SchemaMismatch {
            table: "offset log".into(),
            detail: format!("expected columns {expected:?}, got {:?}", rowset.name_table()),
        }));
    }
    Ok(())
}

/// Reads an [`OffsetLog`], merging its sub-streams in offset order.
pub struct OffsetPartitionReader {
    log: OffsetLog,
    trims: DeferredTrims<Vec<u64>>,
}

impl OffsetPartitionReader {
    pub fn new(log: OffsetLog) -> Self {
        OffsetPartitionReader { log, trims: DeferredTrims::immediate() }
    }

    pub fn with_trim_delay(mut self, delay_ms: u64, clock: Arc<dyn Clock>) -> Self {
        self.trims = DeferredTrims::delayed(delay_ms, clock);
        self
    }

    pub fn pending_trims(&self) -> usize {
        self.trims.pending.len()
    }

    fn offsets<'t>(&self, token: &'t ContinuationToken) -> Result<&'t [u64], InputError> {
        match token {
            ContinuationToken::Offsets(o) if o.len() == self.log.substreams() => Ok(o),
            other => Err(InputError::InvalidToken(format!(
                "offset source with {} sub-streams given {other:?}",
                self.log.substreams()
            ))),
        }
    }

    fn apply_due(&mut self) {
        for positions in self.trims.take_due() {
            self.log.trim_to(&positions);
        }
    }
}

impl PartitionReader for OffsetPartitionReader {
    fn read(&mut self, begin: u64, end: u64, token: &ContinuationToken) -> Result<ReadResult, InputError> {
        let from = self.offsets(token)?.to_vec();
        if begin > end {
            return Err(InputError::Store(StoreError::InvalidRange { begin, end }));
        }
        self.apply_due();
        let limit = (end - begin) as usize;
        let inner = self.log.lock();
        let mut cursors = Vec::with_capacity(from.len());
        for (s, &pos) in inner.substreams.iter().zip(&from) {
            if pos < s.trimmed_before {
                return Err(InputError::Trimmed { position: pos, trimmed_up_to: s.trimmed_before });
            }
            cursors.push(s.entries.partition_point(|(o, _)| *o < pos));
        }
        let mut next = from;
        let mut rows = Vec::new();
        while rows.len() < limit {
            let pick = inner
                .substreams
                .iter()
                .zip(&cursors)
                .enumerate()
                .filter_map(|(i, (s, &c))| s.entries.get(c).map(|(o, _)| (*o, i)))
                .min();
            let Some((offset, i)) = pick else { break };
            rows.push(inner.substreams[i].entries[cursors[i]].1.clone());
            cursors[i] += 1;
            next[i] = offset + 1;
        }
        let rowset = Rowset::new(inner.names.clone(), rows).expect("log rows match its names");
        Ok(ReadResult { rowset, next_token: ContinuationToken::Offsets(next) })
    }

    fn trim(&mut self, _row_index: u64, token: &ContinuationToken) -> Result<(), InputError> {
        let positions = self.offsets(token)?.to_vec();
        self.apply_due();
        if let Some(positions) = self.trims.submit(positions) {
            self.log.trim_to(&positions);
        }
        Ok(())
    }

    fn initial_token(&self) -> ContinuationToken {
        let inner = self.log.lock();
        ContinuationToken::Offsets(inner.substreams.iter().map(|s| s.trimmed_before).collect())
    }
}

/// Wraps a reader so that reads fail with [`InputError::SourceUnavailable`]
/// at a fixed, seeded rate.
pub struct UnreliableReader<R> {
    inner: R,
    rate: f64,
    rng: ChaCha8Rng,
}

impl<R: PartitionReader> UnreliableReader<R> {
    pub fn new(inner: R, rate: f64, seed: u64) -> Self {
        UnreliableReader { inner, rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<R: PartitionReader> PartitionReader for UnreliableReader<R> {
    fn read(&mut self, begin: u64, end: u64, token: &ContinuationToken) -> Result<ReadResult, InputError> {
        if self.rate > 0.0 && self.rng.gen_bool(self.rate) {
            return Err(InputError::SourceUnavailable);
        }
        self.inner.read(begin, end, token)
    }

    fn trim(&mut self, row_index: u64, token: &ContinuationToken) -> Result<(), InputError> {
        self.inner.trim(row_index, token)
    }

    fn initial_token(&self) -> ContinuationToken {
        self.inner.initial_token()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::row::Value;
    use crate::ManualClock;

    fn names() -> NameTable {
        NameTable::from_names(["v"]).unwrap()
    }

    fn rows(range: std::ops::Range<i64>) -> Rowset {
        Rowset::new(names(), range.map(|i| Row(vec![Value::Int64(i)])).collect()).unwrap()
    }

    fn index_source(n: i64) -> (Store, IndexPartitionReader) {
        let store = Store::new();
        store.create_ordered_table("p", names()).unwrap();
        store.append_rows("p", &rows(0..n)).unwrap();
        let reader = IndexPartitionReader::new(store.clone(), "p").unwrap();
        (store, reader)
    }

    fn values(rs: &Rowset) -> Vec<i64> {
        rs.rows().iter().map(|r| r.get(0).as_i64().unwrap()).collect()
    }

    #[test]
    fn token_wire_form() {
        assert_eq!(ContinuationToken::Index(5).to_bytes(), vec![0, 5, 0, 0, 0, 0, 0, 0, 0]);
        let t = ContinuationToken::Offsets(vec![1, 2]);
        assert_eq!(t.to_bytes().len(), 1 + 4 + 16);
        assert_eq!(ContinuationToken::from_bytes(&t.to_bytes()).unwrap(), t);
        assert!(ContinuationToken::from_bytes(&[7]).is_err());
        assert!(ContinuationToken::from_bytes(&[0, 1, 2]).is_err());
        assert!(ContinuationToken::from_bytes(&[1, 255, 255, 255, 255]).is_err());
    }

    #[test]
    fn empty_partition_reads_nothing() {
        let (_, mut reader) = index_source(0);
        let t = reader.initial_token();
        assert_eq!(t, ContinuationToken::Index(0));
        let r = reader.read(0, 10, &t).unwrap();
        assert!(r.rowset.is_empty());
        assert_eq!(r.next_token, t);
    }

    #[test]
    fn index_source_reads_by_absolute_index() {
        let (_, mut reader) = index_source(10);
        let r = reader.read(3, 6, &ContinuationToken::Index(3)).unwrap();
        assert_eq!(values(&r.rowset), vec![3, 4, 5]);
        assert_eq!(r.next_token, ContinuationToken::Index(6));
        let first = reader.read(0, 1, &reader.initial_token()).unwrap();
        assert_eq!(values(&first.rowset), vec![0]);
    }

    #[test]
    fn index_source_rejects_foreign_tokens() {
        let (_, mut reader) = index_source(3);
        let bad = ContinuationToken::Offsets(vec![0]);
        assert!(matches!(reader.read(0, 1, &bad), Err(InputError::InvalidToken(_))));
        assert!(matches!(reader.trim(0, &bad), Err(InputError::InvalidToken(_))));
    }

    #[test]
    fn index_trim_is_idempotent_and_preserves_suffix() {
        let (store, mut reader) = index_source(10);
        reader.trim(0, &reader.initial_token()).unwrap();
        assert_eq!(store.ordered_bounds("p").unwrap(), (0, 10));
        reader.trim(4, &ContinuationToken::Index(4)).unwrap();
        reader.trim(4, &ContinuationToken::Index(4)).unwrap();
        assert_eq!(store.ordered_bounds("p").unwrap(), (4, 10));
        assert_eq!(reader.initial_token(), ContinuationToken::Index(4));
        let r = reader.read(4, 100, &ContinuationToken::Index(4)).unwrap();
        assert_eq!(values(&r.rowset), (4..10).collect::<Vec<_>>());
        assert!(matches!(
            reader.read(0, 1, &ContinuationToken::Index(2)),
            Err(InputError::Trimmed { position: 2, trimmed_up_to: 4 })
        ));
    }

    #[test]
    fn delayed_trim_applies_later() {
        let (store, reader) = index_source(10);
        let clock = ManualClock::new();
        let mut reader = reader.with_trim_delay(100, Arc::new(clock.clone()));
        reader.trim(5, &ContinuationToken::Index(5)).unwrap();
        assert_eq!(store.ordered_bounds("p").unwrap().0, 0);
        // Rows are still readable until the trim lands.
        reader.read(0, 5, &ContinuationToken::Index(0)).unwrap();
        clock.advance(100);
        reader.read(5, 6, &ContinuationToken::Index(5)).unwrap();
        assert_eq!(store.ordered_bounds("p").unwrap().0, 5);
        assert_eq!(reader.pending_trims(), 0);
    }

    fn explicit_log() -> OffsetLog {
        let log = OffsetLog::new(names(), 1, 0);
        for (i, off) in [10u64, 12, 17].into_iter().enumerate() {
            log.append_at(0, off, Row(vec![Value::Int64(i as i64)])).unwrap();
        }
        log
    }

    #[test]
    fn offset_source_skips_gaps_and_replays() {
        let mut reader = OffsetPartitionReader::new(explicit_log());
        let token = ContinuationToken::Offsets(vec![11]);
        let a = reader.read(0, 10, &token).unwrap();
        assert_eq!(values(&a.rowset), vec![1, 2]);
        assert_eq!(a.next_token, ContinuationToken::Offsets(vec![18]));
        let b = reader.read(0, 10, &token).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offset_source_rejects_bad_tokens() {
        let mut reader = OffsetPartitionReader::new(explicit_log());
        assert!(matches!(
            reader.read(0, 1, &ContinuationToken::Index(0)),
            Err(InputError::InvalidToken(_))
        ));
        assert!(matches!(
            reader.read(0, 1, &ContinuationToken::Offsets(vec![0, 0])),
            Err(InputError::InvalidToken(_))
        ));
        assert!(explicit_log().append_at(0, 3, Row(vec![])).is_err());
    }

    #[test]
    fn offset_trim_and_initial_token() {
        let log = explicit_log();
        let mut reader = OffsetPartitionReader::new(log.clone());
        assert_eq!(reader.initial_token(), ContinuationToken::Offsets(vec![0]));
        let t = ContinuationToken::Offsets(vec![13]);
        reader.trim(2, &t).unwrap();
        reader.trim(2, &t).unwrap();
        assert_eq!(log.retained(), 1);
        assert_eq!(reader.initial_token(), t);
        let r = reader.read(0, 10, &reader.initial_token()).unwrap();
        assert_eq!(values(&r.rowset), vec![2]);
        assert!(matches!(
            reader.read(0, 10, &ContinuationToken::Offsets(vec![11])),
            Err(InputError::Trimmed { .. })
        ));
    }

    #[test]
    fn generated_offsets_are_monotone_with_gaps() {
        let log = OffsetLog::new(names(), 2, 9);
        let mut all = Vec::new();
        for i in 0..50 {
            all.extend(log.append(i % 2, &rows(0..3)).unwrap());
        }
        assert!(all.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 3));
        assert!(all.windows(2).any(|w| w[1] - w[0] > 1));
        assert_eq!(log.appended(), 150);
    }

    #[test]
    fn merged_read_is_prefix_stable_under_appends() {
        let log = OffsetLog::new(names(), 3, 1);
        let mut reader = OffsetPartitionReader::new(log.clone());
        let mut seq = 0i64;
        let mut push = |log: &OffsetLog, s: usize| {
            log.append(s, &rows(seq..seq + 1)).unwrap();
            seq += 1;
        };
        for i in 0..30 {
            push(&log, i % 3);
        }
        let start = reader.initial_token();
        let before = reader.read(0, 20, &start).unwrap();
        for i in 0..30 {
            push(&log, (i * 7) % 3);
        }
        let after = reader.read(0, 40, &start).unwrap();
        assert_eq!(&after.rowset.rows()[..20], before.rowset.rows());
        // Reading in small steps yields the same sequence as one big read.
        let mut token = start;
        let mut stepped = Vec::new();
        loop {
            let r = reader.read(0, 7, &token).unwrap();
            if r.rowset.is_empty() {
                break;
            }
            stepped.extend(values(&r.rowset));
            token = r.next_token;
        }
        assert_eq!(stepped, (0..60).collect::<Vec<_>>());
        assert_eq!(token, log.end_token());
    }

    #[test]
    fn unreliable_reader_fails_sometimes() {
        let (_, inner) = index_source(5);
        let mut reader = UnreliableReader::new(inner, 0.5, 3);
        let outcomes: Vec<bool> = (0..40).map(|_| reader.read(0, 1, &ContinuationToken::Index(0)).is_ok()).collect();
        assert!(outcomes.iter().any(|&ok| ok));
        assert!(outcomes.iter().any(|&ok| !ok));
    }
}
