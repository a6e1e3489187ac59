//! Exactly-once verification and the scenario report.

use std::collections::BTreeMap;

use serde::Serialize;

use pullshuffle::row::Row;
use pullshuffle::store::Store;

use crate::checker::{measure_write_amplification, CommitSize, JournalDisabled};
use crate::harness::{HarnessError, Simulation, Status, SPILL_TABLE};
use crate::pipeline::{payload_bytes, Oracle, EFFECTS_TABLE};
use crate::spec::{FaultPlan, PipelineId, ProcessorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Verification {
    pub duplicates: u64,
    pub losses: u64,
    pub oracle_match: bool,
    /// Tables whose final contents differ from the oracle.
    pub mismatched_tables: Vec<String>,
}

impl Verification {
    pub fn verdict(&self) -> Verdict {
        if self.duplicates == 0 && self.losses == 0 && self.oracle_match {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

fn as_i64(row: &Row, pos: usize) -> i64 {
    row.get(pos).as_i64().unwrap_or(0)
}

/// Compares the user tables with the oracle and counts per-row effects.
///
/// With an effects table every emitted row must show a counter of exactly
/// one. Without one, duplicates and losses are inferred from the count
/// column of the single output table, keyed by everything before it.
pub fn verify_exactly_once(store: &Store, pipeline: PipelineId, oracle: &Oracle) -> Verification {
    let mut v = Verification { oracle_match: true, ..Verification::default() };
    let mut actual: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (table, _) in pipeline.output_tables() {
        actual.insert(table.to_string(), store.dump_sorted(table).unwrap_or_default());
    }
    for (table, expected) in &oracle.tables {
        if actual.get(table) != Some(expected) {
            v.oracle_match = false;
            v.mismatched_tables.push(table.clone());
        }
    }

    if let Some(effects) = actual.get(EFFECTS_TABLE) {
        let mut seen = std::collections::BTreeSet::new();
        for row in effects {
            let id = (as_i64(row, 0), as_i64(row, 1));
            let count = as_i64(row, 2);
            if oracle.effects.contains(&id) {
                seen.insert(id);
                v.duplicates += (count - 1).max(0) as u64;
                if count < 1 {
                    v.losses += 1;
                }
            } else {
                v.duplicates += count.max(0) as u64;
            }
        }
        v.losses += (oracle.effects.len() - seen.len()) as u64;
        return v;
    }

    for (table, expected) in &oracle.tables {
        let count_col = match pipeline {
            PipelineId::AccessTally => 2,
            _ => continue,
        };
        let keyed = |rows: &[Row]| -> BTreeMap<Vec<pullshuffle::row::Value>, i64> {
            rows.iter().map(|r| (r.values()[..count_col].to_vec(), as_i64(r, count_col))).collect()
        };
        let want = keyed(expected);
        let have = keyed(actual.get(table).map(Vec::as_slice).unwrap_or_default());
        for (key, &w) in &want {
            let h = have.get(key).copied().unwrap_or(0);
            if h > w {
                v.duplicates += (h - w) as u64;
            } else {
                v.losses += (w - h) as u64;
            }
        }
        for (key, &h) in &have {
            if !want.contains_key(key) {
                v.duplicates += h.max(0) as u64;
            }
        }
    }
    v
}

/// Outcome of one scenario. Field order is fixed so reports diff cleanly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub pipeline: PipelineId,
    pub verdict: Verdict,
    pub status: Status,
    pub duplicates: u64,
    pub losses: u64,
    pub oracle_match: bool,
    pub mismatched_tables: Vec<String>,
    pub atomicity_violations: u64,
    pub stale_view_commits: u64,
    pub duplicate_instance_commits: u64,
    pub restarts: BTreeMap<String, u64>,
    pub faults_applied: u64,
    pub directives_fired: u64,
    pub mapper_split_brains: u64,
    pub reducer_split_brain_skips: u64,
    pub input_rows: u64,
    pub payload_bytes: u64,
    pub meta_bytes: u64,
    pub spill_bytes: u64,
    pub output_bytes: u64,
    pub write_amplification: f64,
    pub meta_bytes_per_commit: BTreeMap<String, CommitSize>,
    pub max_window_bytes: BTreeMap<String, u64>,
    pub reducer_rounds: u64,
    pub reducer_commits: u64,
    pub mapper_state_commits: u64,
    pub virtual_ms: u64,
    pub events_processed: u64,
}

impl ScenarioReport {
    pub fn from_simulation(sim: &Simulation) -> Result<Self, JournalDisabled> {
        let spec = sim.spec();
        let check = verify_exactly_once(sim.store(), spec.pipeline, sim.oracle());
        let data_rows: Vec<Row> = sim.inputs().iter().flatten().cloned().collect();
        let payload = payload_bytes(&data_rows);
        let meta_tables = [spec.state_tables.mapper.as_str(), spec.state_tables.reducer.as_str()];
        let spill = spec.strawman_spill.then_some(SPILL_TABLE);
        let wa = measure_write_amplification(sim.store().journal_stats().as_ref(), payload, &meta_tables, spill)?;
        let c = sim.counters();
        Ok(ScenarioReport {
            seed: sim.seed(),
            pipeline: spec.pipeline,
            verdict: check.verdict(),
            status: sim.status().clone(),
            duplicates: check.duplicates,
            losses: check.losses,
            oracle_match: check.oracle_match,
            mismatched_tables: check.mismatched_tables,
            atomicity_violations: sim.atomicity_violations().len() as u64,
            stale_view_commits: c.stale_view_commits,
            duplicate_instance_commits: c.duplicate_instance_commits,
            restarts: c.restarts.clone(),
            faults_applied: c.faults_applied,
            directives_fired: c.directives_fired,
            mapper_split_brains: c.mapper_split_brains,
            reducer_split_brain_skips: c.reducer_split_brain_skips,
            input_rows: data_rows.len() as u64,
            payload_bytes: payload,
            meta_bytes: wa.meta_bytes,
            spill_bytes: wa.spill_bytes,
            output_bytes: wa.output_bytes,
            write_amplification: wa.ratio,
            meta_bytes_per_commit: wa.meta_bytes_per_commit,
            max_window_bytes: c.max_window_bytes.clone(),
            reducer_rounds: c.reducer_rounds,
            reducer_commits: c.reducer_commits,
            mapper_state_commits: c.mapper_state_commits,
            virtual_ms: sim.now_ms(),
            events_processed: c.events_processed,
        })
    }

    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Builds, runs and reports one scenario with a counting journal.
pub fn run_scenario(spec: ProcessorSpec, plan: FaultPlan, seed: u64) -> Result<ScenarioReport, HarnessError> {
    let mut sim = Simulation::new(spec, plan, seed)?;
    sim.run();
    Ok(ScenarioReport::from_simulation(&sim).expect("simulations always journal"))
}
