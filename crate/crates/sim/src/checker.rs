//! Post-commit checks and byte accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use pullshuffle::reducer::ReducerState;
use pullshuffle::store::{CommitRecord, JournalStats, Store};

use crate::pipeline::{EffectId, ShuffledRow, EFFECTS_TABLE};

#[derive(Debug, Default)]
struct CheckerState {
    commits_checked: u64,
    violations: Vec<String>,
}

/// Watches every commit and verifies that a reducer-progress change
/// carries exactly the effects of the rows it covers, no more and no less.
///
/// Row coverage comes from the oracle's shuffle layout: a progress move for
/// reducer `r` from `a` to `b` on mapper `m` covers the rows with shuffle
/// index in `(a, b]` that mapper `m` assigned to `r`.
#[derive(Clone)]
pub struct AtomicityChecker {
    state: Arc<Mutex<CheckerState>>,
}

impl AtomicityChecker {
    pub fn install(store: &Store, reducer_table: &str, mapper_count: u32, layouts: Vec<Vec<ShuffledRow>>, tracks_effects: bool) -> Self {
        let state = Arc::new(Mutex::new(CheckerState::default()));
        let sink = state.clone();
        let reducer_table = reducer_table.to_string();
        store.add_commit_observer(move |record: &CommitRecord| {
            let found = check_record(record, &reducer_table, mapper_count, &layouts, tracks_effects);
            let mut s = sink.lock().expect("checker lock poisoned");
            s.commits_checked += 1;
            s.violations.extend(found);
        });
        AtomicityChecker { state }
    }

    pub fn commits_checked(&self) -> u64 {
        self.state.lock().expect("checker lock poisoned").commits_checked
    }

    pub fn violations(&self) -> Vec<String> {
        self.state.lock().expect("checker lock poisoned").violations.clone()
    }
}

fn effect_delta(entry: &pullshuffle::store::CommitEntry) -> (EffectId, i64) {
    let count = |row: &Option<pullshuffle::row::Row>| row.as_ref().and_then(|r| r.get(2).as_i64()).unwrap_or(0);
    let id = (entry.key[0].as_i64().unwrap_or(-1), entry.key[1].as_i64().unwrap_or(-1));
    (id, count(&entry.after) - count(&entry.before))
}

fn check_record(record: &CommitRecord, reducer_table: &str, mapper_count: u32, layouts: &[Vec<ShuffledRow>], tracks_effects: bool) -> Vec<String> {
    let mut violations = Vec::new();
    let mut expected: BTreeSet<EffectId> = BTreeSet::new();
    for entry in record.entries.iter().filter(|e| e.table == reducer_table) {
        let reducer = entry.key[0].as_i64().unwrap_or(-1) as u32;
        let before = ReducerState::from_row(entry.before.as_ref(), mapper_count);
        let after = ReducerState::from_row(entry.after.as_ref(), mapper_count);
        let (Ok(before), Ok(after)) = (before, after) else {
            violations.push(format!("commit {}: undecodable reducer state", record.seq));
            continue;
        };
        for (m, (&a, &b)) in before.committed_row_indices.iter().zip(&after.committed_row_indices).enumerate() {
            if b < a {
                violations.push(format!("commit {}: reducer {reducer} moved mapper {m} back from {a} to {b}", record.seq));
                continue;
            }
            let layout = &layouts[m];
            if b >= layout.len() as i64 {
                violations.push(format!("commit {}: reducer {reducer} acknowledged mapper {m} row {b} beyond its stream", record.seq));
                continue;
            }
            for idx in (a + 1)..=b {
                let row = &layout[idx as usize];
                if row.reducer == reducer {
                    expected.extend(row.effect);
                }
            }
        }
    }
    if !tracks_effects {
        return violations;
    }
    let mut observed = BTreeSet::new();
    for entry in record.entries.iter().filter(|e| e.table == EFFECTS_TABLE) {
        let (id, delta) = effect_delta(entry);
        if delta != 1 {
            violations.push(format!("commit {}: effect {id:?} changed by {delta}", record.seq));
        }
        observed.insert(id);
    }
    if observed != expected {
        let missing = expected.difference(&observed).count();
        let extra = observed.difference(&expected).count();
        violations.push(format!(
            "commit {}: progress covers {} effects but {} were written ({missing} missing, {extra} unexpected)",
            record.seq,
            expected.len(),
            observed.len()
        ));
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct CommitSize {
    pub commits: u64,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
}

/// Bytes persisted, split by purpose.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct WriteAmplification {
    pub payload_bytes: u64,
    /// State-table entries plus the record headers of commits that carry them.
    pub meta_bytes: u64,
    /// Shuffled rows persisted by the store-and-forward baseline.
    pub spill_bytes: u64,
    /// User output tables.
    pub output_bytes: u64,
    /// `(meta_bytes + spill_bytes) / payload_bytes`; zero without payload.
    pub ratio: f64,
    /// Per state table: size of its share of each commit, header included.
    pub meta_bytes_per_commit: BTreeMap<String, CommitSize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("the store journal is disabled")]
pub struct JournalDisabled;

pub fn measure_write_amplification(
    stats: Option<&JournalStats>,
    payload_bytes: u64,
    meta_tables: &[&str],
    spill_table: Option<&str>,
) -> Result<WriteAmplification, JournalDisabled> {
    let stats = stats.ok_or(JournalDisabled)?;
    let header = if stats.records == 0 { 0 } else { stats.header_bytes / stats.records };
    let mut wa = WriteAmplification { payload_bytes, ..WriteAmplification::default() };
    let mut sizes: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for commit in &stats.per_commit {
        let meta: u64 = meta_tables.iter().filter_map(|t| commit.get(*t)).sum();
        let spill = spill_table.and_then(|t| commit.get(t)).copied().unwrap_or(0);
        let output: u64 = commit.iter().filter(|(t, _)| !meta_tables.contains(&t.as_str()) && Some(t.as_str()) != spill_table).map(|(_, b)| b).sum();
        if meta > 0 {
            wa.meta_bytes += meta + header;
            for t in meta_tables {
                if let Some(b) = commit.get(*t) {
                    sizes.entry(t.to_string()).or_default().push(b + header);
                }
            }
        } else if spill > 0 {
            wa.spill_bytes += header;
        }
        wa.spill_bytes += spill;
        wa.output_bytes += output;
    }
    wa.ratio = if payload_bytes == 0 { 0.0 } else { (wa.meta_bytes + wa.spill_bytes) as f64 / payload_bytes as f64 };
    for (table, v) in sizes {
        let size = CommitSize {
            commits: v.len() as u64,
            min: *v.iter().min().expect("non-empty"),
            max: *v.iter().max().expect("non-empty"),
            mean: v.iter().sum::<u64>() as f64 / v.len() as f64,
        };
        wa.meta_bytes_per_commit.insert(table, size);
    }
    Ok(wa)
}
