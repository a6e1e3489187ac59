//! Embedded transactional table store.
//!
//! Two kinds of tables live here:
//!
//! * **Sorted tables** hold at most one row per key, with a per-key version
//!   counter. They are read and written through [`Transaction`]s that use
//!   optimistic concurrency: every read records the version it observed and
//!   commit validates the whole read set before applying the write set in one
//!   step. Writes to several tables in one transaction become visible together.
//! * **Ordered tables** are append-only queues with dense absolute indexes
//!   starting at zero; a prefix can be trimmed and is never readable again.
//!
//! Committed write sets can optionally be appended to a journal so that the
//! number of bytes the system persists can be measured.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::row::{ByteReader, NameTable, Row, RowError, Rowset, Value};

pub type Key = Vec<Value>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("table {0:?} not found")]
    TableNotFound(String),
    #[error("table {0:?} already exists")]
    TableExists(String),
    #[error("schema mismatch on {table:?}: {detail}")]
    SchemaMismatch { table: String, detail: String },
    #[error("range [{begin}, ..) of {table:?} is trimmed up to {trimmed_up_to}")]
    TrimmedRange { table: String, begin: u64, trimmed_up_to: u64 },
    #[error("invalid range [{begin}, {end})")]
    InvalidRange { begin: u64, end: u64 },
    #[error("transaction {0} is no longer open")]
    TransactionClosed(u64),
    #[error("state store unavailable")]
    Unavailable,
    #[error("journal write failed: {0}")]
    Journal(String),
}

/// Schema of a sorted table: the first `key_columns` names form the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedSchema {
    pub names: NameTable,
    pub key_columns: usize,
}

impl SortedSchema {
    pub fn new(names: NameTable, key_columns: usize) -> Self {
        assert!(key_columns >= 1 && key_columns <= names.len(), "bad key column count");
        SortedSchema { names, key_columns }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxState {
    Open,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitResult {
    Committed { seq: u64 },
    ConflictAbort,
}

impl CommitResult {
    pub fn is_committed(&self) -> bool {
        matches!(self, CommitResult::Committed { .. })
    }
}

/// One key's change inside a committed transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitEntry {
    pub table: String,
    pub key: Key,
    pub before: Option<Row>,
    pub after: Option<Row>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub seq: u64,
    pub tx_id: u64,
    pub entries: Vec<CommitEntry>,
}

type CommitObserver = Box<dyn FnMut(&CommitRecord) + Send>;

struct Versioned {
    version: u64,
    row: Option<Row>,
}

struct SortedTable {
    schema: SortedSchema,
    rows: BTreeMap<Key, Versioned>,
}

impl SortedTable {
    fn version(&self, key: &Key) -> u64 {
        self.rows.get(key).map_or(0, |v| v.version)
    }
}

struct OrderedTable {
    names: NameTable,
    rows: VecDeque<Row>,
    trimmed_up_to: u64,
}

impl OrderedTable {
    fn end(&self) -> u64 {
        self.trimmed_up_to + self.rows.len() as u64
    }
}

struct Inner {
    sorted: BTreeMap<String, SortedTable>,
    ordered: BTreeMap<String, OrderedTable>,
    next_tx_id: u64,
    commit_seq: u64,
    journal: Option<Journal>,
    observers: Vec<CommitObserver>,
    faults: Option<(f64, ChaCha8Rng)>,
}

impl Inner {
    fn maybe_fail(&mut self) -> Result<(), StoreError> {
        if let Some((rate, rng)) = &mut self.faults {
            if rng.gen_bool(*rate) {
                return Err(StoreError::Unavailable);
            }
        }
        Ok(())
    }

    fn sorted(&self, table: &str) -> Result<&SortedTable, StoreError> {
        self.sorted.get(table).ok_or_else(|| StoreError::TableNotFound(table.to_string()))
    }

    fn ordered(&self, table: &str) -> Result<&OrderedTable, StoreError> {
        self.ordered.get(table).ok_or_else(|| StoreError::TableNotFound(table.to_string()))
    }

    fn ordered_mut(&mut self, table: &str) -> Result<&mut OrderedTable, StoreError> {
        self.ordered.get_mut(table).ok_or_else(|| StoreError::TableNotFound(table.to_string()))
    }
}

/// Shared handle to the store. Cloning is cheap; all clones see the same data.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Mutex<Inner>>,
}

impl Default for Store {
    fn default() -> Self {
        Self::new()
    }
}

impl Store {
    pub fn new() -> Self {
        Store {
            inner: Arc::new(Mutex::new(Inner {
                sorted: BTreeMap::new(),
                ordered: BTreeMap::new(),
                next_tx_id: 1,
                commit_seq: 0,
                journal: None,
                observers: Vec::new(),
                faults: None,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Journals every subsequent commit into `journal`.
    pub fn enable_journal(&self, journal: Journal) {
        self.lock().journal = Some(journal);
    }

    pub fn journal_stats(&self) -> Option<JournalStats> {
        self.lock().journal.as_ref().map(|j| j.stats.clone())
    }

    pub fn flush_journal(&self) -> Result<(), StoreError> {
        match &mut self.lock().journal {
            Some(j) => j.sink.flush().map_err(|e| StoreError::Journal(e.to_string())),
            None => Ok(()),
        }
    }

    /// Registers a callback invoked synchronously, under the store lock, for
    /// every committed transaction in commit order. Observers must not call
    /// back into the store.
    pub fn add_commit_observer(&self, observer: impl FnMut(&CommitRecord) + Send + 'static) {
        self.lock().observers.push(Box::new(observer));
    }

    /// Makes [`Store::fetch`] calls and whole transactions fail with
    /// [`StoreError::Unavailable`] with probability `rate`, drawn from a
    /// generator seeded with `seed`. A transaction draws once when it
    /// begins; if hit, all of its reads and its commit fail. `rate == 0`
    /// disables injection.
    pub fn set_unavailability(&self, rate: f64, seed: u64) {
        self.lock().faults = (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed)));
    }

    pub fn create_sorted_table(&self, name: &str, schema: SortedSchema) -> Result<(), StoreError> {
        let mut inner = self.lock();
        if inner.sorted.contains_key(name) || inner.ordered.contains_key(name) {
            return Err(StoreError::TableExists(name.to_string()));
        }
        inner.sorted.insert(name.to_string(), SortedTable { schema, rows: BTreeMap::new() });
        Ok(())
    }

    pub fn create_ordered_table(&self, name: &str, names: NameTable) -> Result<(), StoreError> {
        let mut inner = self.lock();
        if inner.sorted.contains_key(name) || inner.ordered.contains_key(name) {
            return Err(StoreError::TableExists(name.to_string()));
        }
        inner
            .ordered
            .insert(name.to_string(), OrderedTable { names, rows: VecDeque::new(), trimmed_up_to: 0 });
        Ok(())
    }

    pub fn sorted_schema(&self, table: &str) -> Result<SortedSchema, StoreError> {
        Ok(self.lock().sorted(table)?.schema.clone())
    }

    pub fn begin(&self) -> Transaction {
        let mut inner = self.lock();
        let id = inner.next_tx_id;
        inner.next_tx_id += 1;
        let doomed = inner.maybe_fail().is_err();
        Transaction {
            id,
            store: self.clone(),
            read_set: BTreeMap::new(),
            write_set: BTreeMap::new(),
            state: TxState::Open,
            doomed,
        }
    }

    /// Latest committed row, outside of any transaction.
    pub fn get(&self, table: &str, key: &[Value]) -> Result<Option<Row>, StoreError> {
        let inner = self.lock();
        Ok(inner.sorted(table)?.rows.get(key).and_then(|v| v.row.clone()))
    }

    /// Like [`Store::get`] but subject to injected unavailability, as a remote
    /// lookup would be.
    pub fn fetch(&self, table: &str, key: &[Value]) -> Result<Option<Row>, StoreError> {
        let mut inner = self.lock();
        inner.maybe_fail()?;
        Ok(inner.sorted(table)?.rows.get(key).and_then(|v| v.row.clone()))
    }

    pub fn version(&self, table: &str, key: &[Value]) -> Result<u64, StoreError> {
        let inner = self.lock();
        Ok(inner.sorted(table)?.version(&key.to_vec()))
    }

    /// All live rows of a sorted table in key order.
    pub fn dump_sorted(&self, table: &str) -> Result<Vec<Row>, StoreError> {
        let inner = self.lock();
        Ok(inner.sorted(table)?.rows.values().filter_map(|v| v.row.clone()).collect())
    }

    pub fn commit_seq(&self) -> u64 {
        self.lock().commit_seq
    }

    /// Appends `rowset` and returns the absolute index of its first row (the
    /// current end index for an empty rowset).
    pub fn append_rows(&self, table: &str, rowset: &Rowset) -> Result<u64, StoreError> {
        let mut inner = self.lock();
        let t = inner.ordered_mut(table)?;
        if !rowset.is_empty() && rowset.name_table() != &t.names {
            return Err(StoreError::SchemaMismatch {
                table: table.to_string(),
                detail: format!("expected columns {:?}, got {:?}", t.names, rowset.name_table()),
            });
        }
        let first = t.end();
        t.rows.extend(rowset.rows().iter().cloned());
        Ok(first)
    }

    /// Rows `[begin, min(end, current end))`.
    pub fn read_range(&self, table: &str, begin: u64, end: u64) -> Result<Rowset, StoreError> {
        if begin > end {
            return Err(StoreError::InvalidRange { begin, end });
        }
        let inner = self.lock();
        let t = inner.ordered(table)?;
        if begin < t.trimmed_up_to {
            return Err(StoreError::TrimmedRange {
                table: table.to_string(),
                begin,
                trimmed_up_to: t.trimmed_up_to,
            });
        }
        let stop = end.min(t.end());
        let rows = if begin >= stop {
            Vec::new()
        } else {
            let lo = (begin - t.trimmed_up_to) as usize;
            let hi = (stop - t.trimmed_up_to) as usize;
            t.rows.range(lo..hi).cloned().collect()
        };
        Ok(Rowset::new(t.names.clone(), rows).expect("stored rows match the table"))
    }

    /// Marks every row below `up_to` as deleted. Monotone and idempotent; the
    /// mark never moves past the current end of the table.
    pub fn trim_table(&self, table: &str, up_to: u64) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let t = inner.ordered_mut(table)?;
        let target = up_to.min(t.end());
        while t.trimmed_up_to < target {
            t.rows.pop_front();
            t.trimmed_up_to += 1;
        }
        Ok(())
    }

    pub fn ordered_bounds(&self, table: &str) -> Result<(u64, u64), StoreError> {
        let inner = self.lock();
        let t = inner.ordered(table)?;
        Ok((t.trimmed_up_to, t.end()))
    }

    pub fn ordered_names(&self, table: &str) -> Result<NameTable, StoreError> {
        Ok(self.lock().ordered(table)?.names.clone())
    }
}

/// An optimistic transaction over sorted tables.
pub struct Transaction {
    id: u64,
    store: Store,
    read_set: BTreeMap<(String, Key), u64>,
    write_set: BTreeMap<(String, Key), Option<Row>>,
    state: TxState,
    /// Set when injected unavailability hit this transaction at `begin`:
    /// every read and the commit then fail.
    doomed: bool,
}

impl std::fmt::Debug for Transaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transaction")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("reads", &self.read_set.len())
            .field("writes", &self.write_set.len())
            .finish()
    }
}

impl Transaction {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> TxState {
        self.state
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn read_set_len(&self) -> usize {
        self.read_set.len()
    }

    pub fn write_set_len(&self) -> usize {
        self.write_set.len()
    }

    fn ensure_open(&self) -> Result<(), StoreError> {
        match self.state {
            TxState::Open => Ok(()),
            _ => Err(StoreError::TransactionClosed(self.id)),
        }
    }

    /// Reads the latest committed row (or this transaction's own buffered
    /// write) and records the observed version.
    pub fn read(&mut self, table: &str, key: &[Value]) -> Result<Option<Row>, StoreError> {
        self.ensure_open()?;
        let slot = (table.to_string(), key.to_vec());
        if self.doomed {
            return Err(StoreError::Unavailable);
        }
        let inner = self.store.lock();
        let t = inner.sorted(table)?;
        check_key(table, &t.schema, key)?;
        if let Some(buffered) = self.write_set.get(&slot) {
            return Ok(buffered.clone());
        }
        let (version, row) = match t.rows.get(key) {
            Some(v) => (v.version, v.row.clone()),
            None => (0, None),
        };
        self.read_set.entry(slot).or_insert(version);
        Ok(row)
    }

    /// Buffers `row`, keyed by its leading key columns.
    pub fn write(&mut self, table: &str, row: Row) -> Result<(), StoreError> {
        self.ensure_open()?;
        let inner = self.store.lock();
        let t = inner.sorted(table)?;
        if row.len() != t.schema.names.len() {
            return Err(StoreError::SchemaMismatch {
                table: table.to_string(),
                detail: format!("row has {} values, schema has {} columns", row.len(), t.schema.names.len()),
            });
        }
        let key = row.values()[..t.schema.key_columns].to_vec();
        drop(inner);
        self.write_set.insert((table.to_string(), key), Some(row));
        Ok(())
    }

    pub fn delete(&mut self, table: &str, key: &[Value]) -> Result<(), StoreError> {
        self.ensure_open()?;
        let inner = self.store.lock();
        check_key(table, &inner.sorted(table)?.schema, key)?;
        drop(inner);
        self.write_set.insert((table.to_string(), key.to_vec()), None);
        Ok(())
    }

    pub fn abort(&mut self) {
        if self.state == TxState::Open {
            self.state = TxState::Aborted;
        }
    }

    /// Validates the read set and applies the write set atomically.
    ///
    /// A conflict is reported as [`CommitResult::ConflictAbort`]; an `Err`
    /// means the store could not be reached and nothing was applied. Either
    /// way the transaction is closed afterwards.
    pub fn commit(&mut self) -> Result<CommitResult, StoreError> {
        self.ensure_open()?;
        let store = self.store.clone();
        let mut inner = store.lock();
        if self.doomed {
            self.state = TxState::Aborted;
            return Err(StoreError::Unavailable);
        }
        for ((table, key), &seen) in &self.read_set {
            if inner.sorted(table)?.version(key) != seen {
                self.state = TxState::Aborted;
                return Ok(CommitResult::ConflictAbort);
            }
        }
        if self.write_set.is_empty() {
            self.state = TxState::Committed;
            return Ok(CommitResult::Committed { seq: inner.commit_seq });
        }
        inner.commit_seq += 1;
        let seq = inner.commit_seq;
        let mut entries = Vec::with_capacity(self.write_set.len());
        for ((table, key), row) in std::mem::take(&mut self.write_set) {
            let t = inner.sorted.get_mut(&table).expect("validated at write time");
            let slot = t.rows.entry(key.clone()).or_insert(Versioned { version: 0, row: None });
            slot.version += 1;
            let before = std::mem::replace(&mut slot.row, row.clone());
            entries.push(CommitEntry { table, key, before, after: row });
        }
        let record = CommitRecord { seq, tx_id: self.id, entries };
        if let Some(journal) = &mut inner.journal {
            journal.append(&record)?;
        }
        for observer in &mut inner.observers {
            observer(&record);
        }
        self.state = TxState::Committed;
        Ok(CommitResult::Committed { seq })
    }
}

fn check_key(table: &str, schema: &SortedSchema, key: &[Value]) -> Result<(), StoreError> {
    if key.len() != schema.key_columns {
        return Err(StoreError::SchemaMismatch {
            table: table.to_string(),
            detail: format!("key has {} values, table has {} key columns", key.len(), schema.key_columns),
        });
    }
    Ok(())
}

/// Byte accounting of a journal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JournalStats {
    pub records: u64,
    pub total_bytes: u64,
    /// Length prefix plus fixed record header, summed over records.
    pub header_bytes: u64,
    pub bytes_per_table: BTreeMap<String, u64>,
    /// Per committed transaction: entry bytes by table.
    pub per_commit: Vec<BTreeMap<String, u64>>,
}

/// Append-only journal of committed write sets.
///
/// Record layout (little-endian): `u32 len` of the rest, `u64 tx_seq`,
/// `u32 entry_count`, then per entry `u16 name_len`, table name, encoded key
/// (`u16 count` + values), `u8` marker (1 = row follows, 0 = delete) and the
/// encoded row when present.
pub struct Journal {
    sink: Box<dyn Write + Send>,
    stats: JournalStats,
}

const RECORD_HEADER: u64 = 4 + 8 + 4;

impl Journal {
    pub fn new(sink: impl Write + Send + 'static) -> Self {
        Journal { sink: Box::new(sink), stats: JournalStats::default() }
    }

    /// A journal that only counts bytes.
    pub fn counting() -> Self {
        Journal::new(std::io::sink())
    }

    pub fn to_file(path: &std::path::Path) -> Result<Self, StoreError> {
        let file = std::fs::File::create(path).map_err(|e| StoreError::Journal(e.to_string()))?;
        Ok(Journal::new(std::io::BufWriter::new(file)))
    }

    fn append(&mut self, record: &CommitRecord) -> Result<(), StoreError> {
        let mut body = Vec::new();
        body.extend_from_slice(&record.seq.to_le_bytes());
        body.extend_from_slice(&(record.entries.len() as u32).to_le_bytes());
        let mut per_table: BTreeMap<String, u64> = BTreeMap::new();
        for entry in &record.entries {
            let start = body.len();
            encode_entry(&mut body, &entry.table, &entry.key, entry.after.as_ref());
            *per_table.entry(entry.table.clone()).or_default() += (body.len() - start) as u64;
        }
        let mut framed = Vec::with_capacity(body.len() + 4);
        framed.extend_from_slice(&(body.len() as u32).to_le_bytes());
        framed.extend_from_slice(&body);
        self.sink.write_all(&framed).map_err(|e| StoreError::Journal(e.to_string()))?;

        self.stats.records += 1;
        self.stats.total_bytes += framed.len() as u64;
        self.stats.header_bytes += RECORD_HEADER;
        for (table, bytes) in &per_table {
            *self.stats.bytes_per_table.entry(table.clone()).or_default() += bytes;
        }
        self.stats.per_commit.push(per_table);
        Ok(())
    }
}

fn encode_entry(out: &mut Vec<u8>, table: &str, key: &[Value], row: Option<&Row>) {
    out.extend_from_slice(&(table.len() as u16).to_le_bytes());
    out.extend_from_slice(table.as_bytes());
    Row(key.to_vec()).encode_into(out);
    match row {
        Some(row) => {
            out.push(1);
            row.encode_into(out);
        }
        None => out.push(0),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub table: String,
    pub key: Key,
    pub row: Option<Row>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub seq: u64,
    pub entries: Vec<JournalEntry>,
}

/// Parses a complete journal byte stream.
pub fn decode_journal(bytes: &[u8]) -> Result<Vec<JournalRecord>, RowError> {
    let mut reader = ByteReader::new(bytes);
    let mut records = Vec::new();
    while reader.remaining() > 0 {
        let len = reader.u32()? as usize;
        let mut body = ByteReader::new(reader.take(len)?);
        let seq = body.u64()?;
        let count = body.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = body.u16()? as usize;
            let table = String::from_utf8(body.take(name_len)?.to_vec())
                .map_err(|_| RowError::MalformedEncoding("table name is not utf-8".into()))?;
            let key = Row::decode_from(&mut body)?.0;
            let row = match body.u8()? {
                0 => None,
                1 => Some(Row::decode_from(&mut body)?),
                m => return Err(RowError::MalformedEncoding(format!("entry marker {m}"))),
            };
            entries.push(JournalEntry { table, key, row });
        }
        if body.remaining() != 0 {
            return Err(RowError::MalformedEncoding("trailing bytes in journal record".into()));
        }
        records.push(JournalRecord { seq, entries });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_store() -> Store {
        let store = Store::new();
        let schema = SortedSchema::new(NameTable::from_names(["k", "v"]).unwrap(), 1);
        store.create_sorted_table("t", schema.clone()).unwrap();
        store.create_sorted_table("u", schema).unwrap();
        store
            .create_ordered_table("q", NameTable::from_names(["x"]).unwrap())
            .unwrap();
        store
    }

    fn kv(k: i64, v: i64) -> Row {
        Row(vec![k.into(), v.into()])
    }

    fn q_rows(range: std::ops::Range<i64>) -> Rowset {
        Rowset::new(
            NameTable::from_names(["x"]).unwrap(),
            range.map(|i| Row(vec![i.into()])).collect(),
        )
        .unwrap()
    }

    #[test]
    fn begin_gives_open_distinct_transactions() {
        let store = kv_store();
        let a = store.begin();
        let b = store.begin();
        assert_eq!(a.state(), TxState::Open);
        assert_ne!(a.id(), b.id());
        assert_eq!(a.read_set_len() + a.write_set_len(), 0);
    }

    #[test]
    fn empty_commit_leaves_store_unchanged() {
        let store = kv_store();
        let mut tx = store.begin();
        assert!(tx.commit().unwrap().is_committed());
        assert_eq!(tx.state(), TxState::Committed);
        assert_eq!(store.commit_seq(), 0);
        assert!(matches!(tx.commit(), Err(StoreError::TransactionClosed(_))));
    }

    #[test]
    fn read_of_missing_key_records_version_zero() {
        let store = kv_store();
        let mut tx = store.begin();
        assert_eq!(tx.read("t", &[1i64.into()]).unwrap(), None);
        assert_eq!(tx.read_set.values().copied().collect::<Vec<_>>(), vec![0]);
        assert!(matches!(tx.read("nope", &[1i64.into()]), Err(StoreError::TableNotFound(_))));
    }

    #[test]
    fn committed_write_is_visible_and_bumps_version() {
        let store = kv_store();
        let mut tx = store.begin();
        tx.write("t", kv(1, 1)).unwrap();
        assert!(tx.commit().unwrap().is_committed());
        let mut tx = store.begin();
        assert_eq!(tx.read("t", &[1i64.into()]).unwrap(), Some(kv(1, 1)));
        assert_eq!(store.version("t", &[1i64.into()]).unwrap(), 1);
    }

    #[test]
    fn read_your_writes_and_abort() {
        let store = kv_store();
        let mut tx = store.begin();
        tx.write("t", kv(5, 50)).unwrap();
        assert_eq!(tx.read("t", &[5i64.into()]).unwrap(), Some(kv(5, 50)));
        tx.abort();
        assert_eq!(tx.state(), TxState::Aborted);
        assert_eq!(store.get("t", &[5i64.into()]).unwrap(), None);
    }

    #[test]
    fn schema_mismatch_on_wrong_width() {
        let store = kv_store();
        let mut tx = store.begin();
        assert!(matches!(
            tx.write("t", Row(vec![1i64.into()])),
            Err(StoreError::SchemaMismatch { .. })
        ));
        assert!(matches!(tx.read("t", &[]), Err(StoreError::SchemaMismatch { .. })));
    }

    #[test]
    fn concurrent_read_modify_write_has_one_winner() {
        let store = kv_store();
        let key = [1i64.into()];
        let mut a = store.begin();
        let mut b = store.begin();
        a.read("t", &key).unwrap();
        b.read("t", &key).unwrap();
        a.write("t", kv(1, 10)).unwrap();
        b.write("t", kv(1, 20)).unwrap();
        assert!(a.commit().unwrap().is_committed());
        assert_eq!(b.commit().unwrap(), CommitResult::ConflictAbort);
        assert_eq!(b.state(), TxState::Aborted);
        // The survivor's value, as in the serial order (a).
        assert_eq!(store.get("t", &key).unwrap(), Some(kv(1, 10)));
    }

    #[test]
    fn concurrent_increments_do_not_lose_updates() {
        let store = kv_store();
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let store = store.clone();
                std::thread::spawn(move || {
                    for _ in 0..50 {
                        loop {
                            let mut tx = store.begin();
                            let cur = tx
                                .read("t", &[0i64.into()])
                                .unwrap()
                                .map_or(0, |r| r.get(1).as_i64().unwrap());
                            tx.write("t", kv(0, cur + 1)).unwrap();
                            if tx.commit().unwrap().is_committed() {
                                break;
                            }
                        }
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(store.get("t", &[0i64.into()]).unwrap(), Some(kv(0, 400)));
    }

    #[test]
    fn multi_table_commit_is_atomic_to_concurrent_readers() {
        let store = kv_store();
        let writer = {
            let store = store.clone();
            std::thread::spawn(move || {
                for i in 1..=300 {
                    let mut tx = store.begin();
                    tx.write("t", kv(0, i)).unwrap();
                    tx.write("u", kv(0, i)).unwrap();
                    assert!(tx.commit().unwrap().is_committed());
                }
            })
        };
        // Snapshot both tables in one read-only transaction; validation at
        // commit guarantees the two reads belong to the same committed state.
        let mut consistent = 0;
        while consistent < 300 {
            let mut tx = store.begin();
            let t = tx.read("t", &[0i64.into()]).unwrap();
            let u = tx.read("u", &[0i64.into()]).unwrap();
            if tx.commit().unwrap().is_committed() {
                assert_eq!(t, u);
                consistent += 1;
            }
        }
        writer.join().unwrap();
    }

    #[test]
    fn commit_observer_sees_before_and_after_images() {
        let store = kv_store();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        store.add_commit_observer(move |r| sink.lock().unwrap().push(r.clone()));
        for v in [1, 2] {
            let mut tx = store.begin();
            tx.write("t", kv(9, v)).unwrap();
            tx.commit().unwrap();
        }
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[1].entries[0].before, Some(kv(9, 1)));
        assert_eq!(seen[1].entries[0].after, Some(kv(9, 2)));
    }

    #[test]
    fn ordered_table_append_read_trim() {
        let store = kv_store();
        assert_eq!(store.append_rows("q", &q_rows(0..3)).unwrap(), 0);
        assert_eq!(store.append_rows("q", &q_rows(0..0)).unwrap(), 3);
        assert_eq!(store.append_rows("q", &q_rows(3..8)).unwrap(), 3);
        assert_eq!(store.read_range("q", 0, 5).unwrap(), q_rows(0..5));
        assert_eq!(store.read_range("q", 6, 100).unwrap(), q_rows(6..8));
        assert!(store.read_range("q", 2, 2).unwrap().is_empty());
        assert!(matches!(store.read_range("q", 3, 2), Err(StoreError::InvalidRange { .. })));

        store.trim_table("q", 4).unwrap();
        assert!(matches!(store.read_range("q", 3, 6), Err(StoreError::TrimmedRange { .. })));
        assert_eq!(store.read_range("q", 4, 6).unwrap(), q_rows(4..6));

        store.trim_table("q", 5).unwrap();
        store.trim_table("q", 5).unwrap();
        store.trim_table("q", 2).unwrap();
        assert_eq!(store.ordered_bounds("q").unwrap(), (5, 8));
        assert_eq!(store.read_range("q", 5, 8).unwrap(), q_rows(5..8));
    }

    #[test]
    fn short_read_on_small_table() {
        let store = kv_store();
        store.append_rows("q", &q_rows(0..3)).unwrap();
        assert_eq!(store.read_range("q", 0, 5).unwrap().len(), 3);
    }

    #[test]
    fn interleaved_producers_get_contiguous_indexes() {
        let store = kv_store();
        let handles: Vec<_> = (0..2)
            .map(|p| {
                let store = store.clone();
                std::thread::spawn(move || {
                    let mut firsts = Vec::new();
                    for i in 0..100 {
                        let base = (p * 1000 + i * 2) as i64;
                        firsts.push(store.append_rows("q", &q_rows(base..base + 2)).unwrap());
                    }
                    firsts
                })
            })
            .collect();
        let mut firsts: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..200).map(|i| i * 2).collect::<Vec<u64>>());
        let all = store.read_range("q", 0, 400).unwrap();
        let mut values: Vec<i64> = all.rows().iter().map(|r| r.get(0).as_i64().unwrap()).collect();
        values.sort_unstable();
        let mut expected: Vec<i64> = (0..200).chain(1000..1200).collect();
        expected.sort_unstable();
        assert_eq!(values, expected);
    }

    #[test]
    fn trim_preserves_untrimmed_suffix() {
        let store = kv_store();
        store.append_rows("q", &q_rows(0..20)).unwrap();
        let shadow = q_rows(0..20);
        for n in [0u64, 3, 3, 11, 20] {
            store.trim_table("q", n).unwrap();
            let suffix = store.read_range("q", n, 20).unwrap();
            assert_eq!(suffix.rows(), &shadow.rows()[n as usize..]);
        }
    }

    #[test]
    fn journal_records_only_committed_write_sets() {
        let store = kv_store();
        let buf = SharedBuf::default();
        store.enable_journal(Journal::new(buf.clone()));
        let mut tx = store.begin();
        tx.write("t", kv(1, 7)).unwrap();
        tx.write("u", kv(2, 8)).unwrap();
        tx.commit().unwrap();
        let mut aborted = store.begin();
        aborted.write("t", kv(3, 3)).unwrap();
        aborted.abort();
        let mut del = store.begin();
        del.delete("t", &[1i64.into()]).unwrap();
        del.commit().unwrap();

        let bytes = buf.0.lock().unwrap().clone();
        let records = decode_journal(&bytes).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].seq, 1);
        assert_eq!(records[0].entries[0], JournalEntry { table: "t".into(), key: vec![1i64.into()], row: Some(kv(1, 7)) });
        assert_eq!(records[1].entries[0].row, None);

        let stats = store.journal_stats().unwrap();
        assert_eq!(stats.records, 2);
        assert_eq!(stats.total_bytes, bytes.len() as u64);
        let entry_bytes: u64 = stats.bytes_per_table.values().sum();
        assert_eq!(stats.header_bytes + entry_bytes, stats.total_bytes);
    }

    #[test]
    fn injected_unavailability_fails_reads_and_commits() {
        let store = kv_store();
        store.set_unavailability(1.0, 1);
        let mut tx = store.begin();
        assert_eq!(tx.read("t", &[1i64.into()]), Err(StoreError::Unavailable));
        tx.write("t", kv(1, 1)).unwrap();
        assert_eq!(tx.commit(), Err(StoreError::Unavailable));
        store.set_unavailability(0.0, 1);
        assert_eq!(store.get("t", &[1i64.into()]).unwrap(), None);
    }

    #[derive(Clone, Default)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
}
