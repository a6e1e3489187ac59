//! Schematized rows, rowsets and the canonical binary encoding.
//!
//! Rowset encoding (little-endian):
//!
//! ```text
//! u32 name_count
//!   per name:  u16 len, bytes
//! u32 row_count
//!   per row:   u16 value_count
//!     per value: u8 kind, payload
//!                Null     -> (nothing)
//!                Int64    -> 8 bytes
//!                Uint64   -> 8 bytes
//!                Double   -> 8 bytes (IEEE-754 bits)
//!                Boolean  -> 1 byte (0 / 1)
//!                String   -> u32 len, bytes
//! ```
//!
//! The same per-row layout (`u16 value_count` followed by values) is used for
//! sorted-table keys and rows in the store journal.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RowError {
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("key column {0:?} is not present in the name table")]
    MissingKeyColumn(String),
    #[error("duplicate column name {0:?}")]
    DuplicateName(String),
    #[error("column name of {0} bytes exceeds the u16 length limit")]
    NameTooLong(usize),
    #[error("row {row} has {values} values but the name table has {columns} columns")]
    RowTooWide { row: usize, values: usize, columns: usize },
    #[error("partition index list has {indexes} entries for {rows} rows")]
    PartitionLengthMismatch { rows: usize, indexes: usize },
    #[error("partition index {index} out of range for {reducer_count} reducers")]
    PartitionOutOfRange { index: u32, reducer_count: u32 },
    #[error("reducer count must be at least 1")]
    ZeroReducers,
}

/// Kind tags as they appear on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum ValueKind {
    Null = 0,
    Int64 = 1,
    Uint64 = 2,
    Double = 3,
    Boolean = 4,
    String = 5,
}

impl ValueKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ValueKind::Null,
            1 => ValueKind::Int64,
            2 => ValueKind::Uint64,
            3 => ValueKind::Double,
            4 => ValueKind::Boolean,
            5 => ValueKind::String,
            _ => return None,
        })
    }
}

/// A strictly typed data value. `String` holds arbitrary bytes.
///
/// Doubles compare and hash by bit pattern so that decoding is an exact
/// inverse of encoding (NaN payloads included).
#[derive(Clone)]
pub enum Value {
    Null,
    Int64(i64),
    Uint64(u64),
    Double(f64),
    Boolean(bool),
    String(Vec<u8>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Null => ValueKind::Null,
            Value::Int64(_) => ValueKind::Int64,
            Value::Uint64(_) => ValueKind::Uint64,
            Value::Double(_) => ValueKind::Double,
            Value::Boolean(_) => ValueKind::Boolean,
            Value::String(_) => ValueKind::String,
        }
    }

    pub fn str(s: impl AsRef<str>) -> Self {
        Value::String(s.as_ref().as_bytes().to_vec())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::Int64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            Value::Uint64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Double(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Value::Boolean(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::String(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        self.as_bytes().and_then(|b| std::str::from_utf8(b).ok())
    }

    fn encoded_len(&self) -> usize {
        1 + match self {
            Value::Null => 0,
            Value::Int64(_) | Value::Uint64(_) | Value::Double(_) => 8,
            Value::Boolean(_) => 1,
            Value::String(s) => 4 + s.len(),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind() as u8);
        match self {
            Value::Null => {}
            Value::Int64(v) => out.extend_from_slice(&v.to_le_bytes()),
            Value::Uint64(v) => out.extend_from_slice(&v.to_le_bytes()),
            Value::Double(v) => out.extend_from_slice(&v.to_bits().to_le_bytes()),
            Value::Boolean(v) => out.push(*v as u8),
            Value::String(s) => {
                let len = u32::try_from(s.len()).expect("string value exceeds u32 length");
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(s);
            }
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order: by kind tag first, then by payload.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Null, Value::Null) => Ordering::Equal,
            (Value::Int64(a), Value::Int64(b)) => a.cmp(b),
            (Value::Uint64(a), Value::Uint64(b)) => a.cmp(b),
            (Value::Double(a), Value::Double(b)) => a.to_bits().cmp(&b.to_bits()).then(a.total_cmp(b)),
            (Value::Boolean(a), Value::Boolean(b)) => a.cmp(b),
            (Value::String(a), Value::String(b)) => a.cmp(b),
            _ => self.kind().cmp(&other.kind()),
        }
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (self.kind() as u8).hash(state);
        match self {
            Value::Null => {}
            Value::Int64(v) => v.hash(state),
            Value::Uint64(v) => v.hash(state),
            Value::Double(v) => v.to_bits().hash(state),
            Value::Boolean(v) => v.hash(state),
            Value::String(v) => v.hash(state),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => write!(f, "#"),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Uint64(v) => write!(f, "{v}u"),
            Value::Double(v) => write!(f, "{v:?}"),
            Value::Boolean(v) => write!(f, "%{v}"),
            Value::String(v) => match std::str::from_utf8(v) {
                Ok(s) => write!(f, "{s:?}"),
                Err(_) => write!(f, "b{v:?}"),
            },
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int64(v)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Uint64(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Double(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::str(v)
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::String(v.into_bytes())
    }
}

/// Ordered list of unique column names with a reverse index.
#[derive(Clone, Default)]
pub struct NameTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl NameTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self, RowError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = NameTable::new();
        for name in names {
            let name = name.into();
            if table.index.contains_key(&name) {
                return Err(RowError::DuplicateName(name));
            }
            table.get_or_insert(&name)?;
        }
        Ok(table)
    }

    /// Position of `name`, registering it at the end if it is new.
    pub fn get_or_insert(&mut self, name: &str) -> Result<usize, RowError> {
        if let Some(&pos) = self.index.get(name) {
            return Ok(pos);
        }
        if name.len() > u16::MAX as usize {
            return Err(RowError::NameTooLong(name.len()));
        }
        let pos = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), pos);
        Ok(pos)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, pos: usize) -> Option<&str> {
        self.names.get(pos).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl PartialEq for NameTable {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
    }
}

impl Eq for NameTable {}

impl fmt::Debug for NameTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.names).finish()
    }
}

/// Values positionally aligned with some name table. Missing trailing values
/// read as null.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Row(pub Vec<Value>);

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row(values)
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, pos: usize) -> &Value {
        const NULL: Value = Value::Null;
        self.0.get(pos).unwrap_or(&NULL)
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.0.iter().map(Value::encoded_len).sum::<usize>()
    }

    /// Appends `u16 value_count` + values.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let count = u16::try_from(self.0.len()).expect("row exceeds u16 value count");
        out.extend_from_slice(&count.to_le_bytes());
        for v in &self.0 {
            v.encode_into(out);
        }
    }

    pub fn decode_from(reader: &mut ByteReader<'_>) -> Result<Row, RowError> {
        let count = reader.u16()?;
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            values.push(decode_value(reader)?);
        }
        Ok(Row(values))
    }
}

impl fmt::Debug for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl<V: Into<Value>> FromIterator<V> for Row {
    fn from_iter<T: IntoIterator<Item = V>>(iter: T) -> Self {
        Row(iter.into_iter().map(Into::into).collect())
    }
}

/// Rows sharing one name table.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Rowset {
    name_table: NameTable,
    rows: Vec<Row>,
}

impl Rowset {
    pub fn new(name_table: NameTable, rows: Vec<Row>) -> Result<Self, RowError> {
        for (i, row) in rows.iter().enumerate() {
            check_row_width(i, row, &name_table)?;
        }
        Ok(Rowset { name_table, rows })
    }

    pub fn empty(name_table: NameTable) -> Self {
        Rowset { name_table, rows: Vec::new() }
    }

    pub fn name_table(&self) -> &NameTable {
        &self.name_table
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn into_parts(self) -> (NameTable, Vec<Row>) {
        (self.name_table, self.rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Value of column `name` in row `row`, null when the column is absent.
    pub fn value(&self, row: usize, name: &str) -> &Value {
        const NULL: Value = Value::Null;
        match self.name_table.position(name) {
            Some(pos) => self.rows[row].get(pos),
            None => &NULL,
        }
    }

    pub fn push(&mut self, row: Row) -> Result<(), RowError> {
        check_row_width(self.rows.len(), &row, &self.name_table)?;
        self.rows.push(row);
        Ok(())
    }

    /// Size of [`encode_rowset`] output without materializing it.
    pub fn encoded_len(&self) -> usize {
        4 + self.name_table.names.iter().map(|n| 2 + n.len()).sum::<usize>()
            + 4
            + self.rows.iter().map(Row::encoded_len).sum::<usize>()
    }
}

fn check_row_width(i: usize, row: &Row, names: &NameTable) -> Result<(), RowError> {
    if row.len() > names.len() || row.len() > u16::MAX as usize {
        return Err(RowError::RowTooWide { row: i, values: row.len(), columns: names.len() });
    }
    Ok(())
}

/// Accumulates rows coming from rowsets with possibly different name tables,
/// remapping columns by name into one merged table.
#[derive(Default)]
pub struct RowsetBuilder {
    name_table: NameTable,
    rows: Vec<Row>,
}

impl RowsetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `source.rows()[i]` for each `i` in `indexes`, in order.
    pub fn extend_from(&mut self, source: &Rowset, indexes: impl IntoIterator<Item = usize>) {
        let remap: Vec<usize> = source
            .name_table
            .names
            .iter()
            .map(|n| self.name_table.get_or_insert(n).expect("name already validated"))
            .collect();
        let identity = remap.iter().enumerate().all(|(i, &p)| i == p);
        for i in indexes {
            let row = &source.rows[i];
            if identity {
                self.rows.push(row.clone());
                continue;
            }
            let width = row.0.iter().enumerate().map(|(j, _)| remap[j] + 1).max().unwrap_or(0);
            let mut values = vec![Value::Null; width];
            for (j, v) in row.0.iter().enumerate() {
                values[remap[j]] = v.clone();
            }
            self.rows.push(Row(values));
        }
    }

    pub fn extend_all(&mut self, source: &Rowset) {
        self.extend_from(source, 0..source.len());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn finish(self) -> Rowset {
        Rowset { name_table: self.name_table, rows: self.rows }
    }
}

/// A mapped rowset together with the reducer index of every row.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PartitionedRowset {
    rowset: Rowset,
    partition_indexes: Vec<u32>,
}

impl PartitionedRowset {
    pub fn new(rowset: Rowset, partition_indexes: Vec<u32>) -> Result<Self, RowError> {
        if rowset.len() != partition_indexes.len() {
            return Err(RowError::PartitionLengthMismatch {
                rows: rowset.len(),
                indexes: partition_indexes.len(),
            });
        }
        Ok(PartitionedRowset { rowset, partition_indexes })
    }

    /// Checks every index against `reducer_count`.
    pub fn validate(&self, reducer_count: u32) -> Result<(), RowError> {
        if let Some(&index) = self.partition_indexes.iter().find(|&&i| i >= reducer_count) {
            return Err(RowError::PartitionOutOfRange { index, reducer_count });
        }
        Ok(())
    }

    pub fn rowset(&self) -> &Rowset {
        &self.rowset
    }

    pub fn partition_indexes(&self) -> &[u32] {
        &self.partition_indexes
    }

    pub fn into_parts(self) -> (Rowset, Vec<u32>) {
        (self.rowset, self.partition_indexes)
    }
}

pub fn encode_rowset(rowset: &Rowset) -> Vec<u8> {
    let mut out = Vec::with_capacity(rowset.encoded_len());
    out.extend_from_slice(&(rowset.name_table.len() as u32).to_le_bytes());
    for name in &rowset.name_table.names {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(rowset.rows.len() as u32).to_le_bytes());
    for row in &rowset.rows {
        row.encode_into(&mut out);
    }
    out
}

pub fn decode_rowset(bytes: &[u8]) -> Result<Rowset, RowError> {
    let mut reader = ByteReader::new(bytes);
    let name_count = reader.u32()?;
    let mut names = NameTable::new();
    for _ in 0..name_count {
        let len = reader.u16()? as usize;
        let raw = reader.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| RowError::MalformedEncoding("column name is not utf-8".into()))?;
        if names.position(name).is_some() {
            return Err(RowError::MalformedEncoding(format!("duplicate column name {name:?}")));
        }
        names.get_or_insert(name)?;
    }
    let row_count = reader.u32()? as usize;
    // Every row takes at least two bytes; refuse absurd counts before allocating.
    if row_count > reader.remaining() / 2 {
        return Err(RowError::MalformedEncoding(format!("row count {row_count} overruns buffer")));
    }
    let mut rows = Vec::with_capacity(row_count);
    for _ in 0..row_count {
        rows.push(Row::decode_from(&mut reader)?);
    }
    if reader.remaining() != 0 {
        return Err(RowError::MalformedEncoding(format!("{} trailing bytes", reader.remaining())));
    }
    Rowset::new(names, rows).map_err(|e| RowError::MalformedEncoding(e.to_string()))
}

fn decode_value(reader: &mut ByteReader<'_>) -> Result<Value, RowError> {
    let tag = reader.u8()?;
    let kind = ValueKind::from_tag(tag)
        .ok_or_else(|| RowError::MalformedEncoding(format!("unknown kind tag {tag}")))?;
    Ok(match kind {
        ValueKind::Null => Value::Null,
        ValueKind::Int64 => Value::Int64(i64::from_le_bytes(reader.array()?)),
        ValueKind::Uint64 => Value::Uint64(u64::from_le_bytes(reader.array()?)),
        ValueKind::Double => Value::Double(f64::from_bits(u64::from_le_bytes(reader.array()?))),
        ValueKind::Boolean => match reader.u8()? {
            0 => Value::Boolean(false),
            1 => Value::Boolean(true),
            b => return Err(RowError::MalformedEncoding(format!("boolean byte {b}"))),
        },
        ValueKind::String => {
            let len = reader.u32()? as usize;
            Value::String(reader.take(len)?.to_vec())
        }
    })
}

/// Bounds-checked little-endian cursor over a byte slice.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], RowError> {
        if self.remaining() < n {
            return Err(RowError::MalformedEncoding(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], RowError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, RowError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, RowError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, RowError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, RowError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seedless 64-bit FNV-1a.
#[derive(Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Resolved key columns for hash partitioning.
///
/// Each key value is fed to FNV-1a as its canonical encoding (kind tag byte
/// plus payload, strings length-prefixed); nulls contribute only their tag.
/// The reducer index is `hash % reducer_count`.
#[derive(Clone, Debug)]
pub struct HashPartitioner {
    positions: Vec<usize>,
}

impl HashPartitioner {
    pub fn new(names: &NameTable, key_columns: &[&str]) -> Result<Self, RowError> {
        let positions = key_columns
            .iter()
            .map(|c| names.position(c).ok_or_else(|| RowError::MissingKeyColumn(c.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(HashPartitioner { positions })
    }

    pub fn hash(&self, row: &Row) -> u64 {
        let mut h = Fnv1a::default();
        let mut scratch = Vec::with_capacity(16);
        for &pos in &self.positions {
            scratch.clear();
            row.get(pos).encode_into(&mut scratch);
            h.write(&scratch);
        }
        h.finish()
    }

    pub fn partition(&self, row: &Row, reducer_count: u32) -> u32 {
        assert!(reducer_count >= 1, "reducer count must be at least 1");
        (self.hash(row) % reducer_count as u64) as u32
    }
}

/// One-shot form of [`HashPartitioner`].
pub fn hash_partition(
    row: &Row,
    names: &NameTable,
    key_columns: &[&str],
    reducer_count: u32,
) -> Result<u32, RowError> {
    if reducer_count == 0 {
        return Err(RowError::ZeroReducers);
    }
    Ok(HashPartitioner::new(names, key_columns)?.partition(row, reducer_count))
}
