//! Processor specs and fault plans.
//!
//! Both are JSON documents. Unknown fields are rejected and every error names
//! the offending field.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pullshuffle::reducer::CommitOrder;

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("invalid JSON at `{path}`: {message}")]
    Json { path: String, message: String },
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, SpecError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| SpecError::Json { path: e.path().to_string(), message: e.into_inner().to_string() })
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SpecError {
    SpecError::Invalid { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineId {
    /// Tally per key plus one effect counter per emitted row; the pipeline
    /// used for exactly-once checks.
    ExactlyOnceTally,
    /// Per user/cluster access tally with the last access timestamp.
    AccessTally,
    /// Rows flow through untouched and the reducer writes nothing.
    PassThrough,
}

impl fmt::Display for PipelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineId::ExactlyOnceTally => "exactly_once_tally",
            PipelineId::AccessTally => "access_tally",
            PipelineId::PassThrough => "pass_through",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    OrderedTable,
    OffsetLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRow {
    pub partition: u32,
    /// Number of generated rows preceding the control row in its partition.
    pub at_row: u64,
    /// `ctl:...` for the mapper side, `rctl:...` for the reducer side.
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSpec {
    pub kind: SourceKind,
    pub rows_per_partition: u64,
    pub payload_bytes: usize,
    pub key_cardinality: u64,
    pub append_batch_rows: u64,
    pub append_interval_ms: u64,
    /// Sub-streams per partition for the offset source.
    pub substreams: usize,
    pub trim_delay_ms: u64,
    /// Fraction of access-log rows without a user.
    pub missing_user_fraction: f64,
    pub control_rows: Vec<ControlRow>,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            kind: SourceKind::OrderedTable,
            rows_per_partition: 1000,
            payload_bytes: 16,
            key_cardinality: 64,
            append_batch_rows: 25,
            append_interval_ms: 10,
            substreams: 2,
            trim_delay_ms: 0,
            missing_user_fraction: 0.1,
            control_rows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateTables {
    pub mapper: String,
    pub reducer: String,
}

impl Default for StateTables {
    fn default() -> Self {
        StateTables { mapper: "mapper_state".into(), reducer: "reducer_state".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperSettings {
    pub max_batch_rows: u64,
    pub memory_limit_bytes: u64,
    pub backoff_ms: u64,
    pub split_brain_delay_ms: u64,
    pub trim_period_ms: u64,
    /// Virtual time one non-empty ingestion step takes.
    pub step_cost_ms: u64,
}

impl Default for MapperSettings {
    fn default() -> Self {
        MapperSettings {
            max_batch_rows: 1024,
            memory_limit_bytes: 64 << 20,
            backoff_ms: 100,
            split_brain_delay_ms: 5000,
            trim_period_ms: 2000,
            step_cost_ms: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommitOrderSetting {
    #[default]
    Atomic,
    UserFirst,
    MetaFirst,
}

impl From<CommitOrderSetting> for CommitOrder {
    fn from(c: CommitOrderSetting) -> Self {
        match c {
            CommitOrderSetting::Atomic => CommitOrder::Atomic,
            CommitOrderSetting::UserFirst => CommitOrder::UserFirst,
            CommitOrderSetting::MetaFirst => CommitOrder::MetaFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReducerSettings {
    pub max_rows_per_mapper: i64,
    pub backoff_ms: u64,
    pub commit_order: CommitOrderSetting,
    /// Gap between the two halves of a broken-order commit.
    pub deferred_gap_ms: u64,
}

impl Default for ReducerSettings {
    fn default() -> Self {
        ReducerSettings { max_rows_per_mapper: 512, backoff_ms: 100, commit_order: CommitOrderSetting::Atomic, deferred_gap_ms: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSettings {
    pub drop_probability: f64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub timeout_ms: u64,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings { drop_probability: 0.0, latency_min_ms: 1, latency_max_ms: 5, timeout_ms: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopSettings {
    /// Consecutive empty rounds each reducer must see once input is drained.
    pub quiet_rounds: u32,
    /// Virtual-time bound; exceeding it is reported as a deadlock.
    pub max_virtual_ms: u64,
}

impl Default for StopSettings {
    fn default() -> Self {
        StopSettings { quiet_rounds: 3, max_virtual_ms: 3_600_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorSpec {
    #[serde(default)]
    pub processor_guid: Option<String>,
    pub mapper_count: u32,
    pub reducer_count: u32,
    pub pipeline: PipelineId,
    #[serde(default)]
    pub input: InputSpec,
    #[serde(default)]
    pub state_tables: StateTables,
    #[serde(default)]
    pub mapper: MapperSettings,
    #[serde(default)]
    pub reducer: ReducerSettings,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default = "default_discovery_delay")]
    pub discovery_delay_ms: u64,
    #[serde(default = "default_restart_delay")]
    pub restart_delay_ms: u64,
    /// Persist every shuffled row (store-and-forward baseline).
    #[serde(default)]
    pub strawman_spill: bool,
    #[serde(default)]
    pub stop: StopSettings,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_ms: u64,
}

fn default_discovery_delay() -> u64 {
    500
}

fn default_restart_delay() -> u64 {
    1000
}

fn default_sample_interval() -> u64 {
    100
}

impl ProcessorSpec {
    pub fn new(pipeline: PipelineId, mapper_count: u32, reducer_count: u32) -> Self {
        ProcessorSpec {
            processor_guid: None,
            mapper_count,
            reducer_count,
            pipeline,
            input: InputSpec::default(),
            state_tables: StateTables::default(),
            mapper: MapperSettings::default(),
            reducer: ReducerSettings::default(),
            network: NetworkSettings::default(),
            discovery_delay_ms: default_discovery_delay(),
            restart_delay_ms: default_restart_delay(),
            strawman_spill: false,
            stop: StopSettings::default(),
            sample_interval_ms: default_sample_interval(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        let spec: ProcessorSpec = parse(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.mapper_count == 0 {
            return Err(invalid("mapper_count", "must be at least 1"));
        }
        if self.reducer_count == 0 {
            return Err(invalid("reducer_count", "must be at least 1"));
        }
        if let Some(g) = &self.processor_guid {
            g.parse::<pullshuffle::Guid>().map_err(|e| invalid("processor_guid", e.to_string()))?;
        }
        let i = &self.input;
        if i.append_batch_rows == 0 {
            return Err(invalid("input.append_batch_rows", "must be at least 1"));
        }
        if i.key_cardinality == 0 {
            return Err(invalid("input.key_cardinality", "must be at least 1"));
        }
        if i.kind == SourceKind::OffsetLog && i.substreams == 0 {
            return Err(invalid("input.substreams", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&i.missing_user_fraction) {
            return Err(invalid("input.missing_user_fraction", "must be within [0, 1]"));
        }
        if !i.control_rows.is_empty() && !self.pipeline.supports_control_rows() {
            return Err(invalid("input.control_rows", format!("not supported by the {} pipeline", self.pipeline)));
        }
        for (n, c) in i.control_rows.iter().enumerate() {
            if c.partition >= self.mapper_count {
                return Err(invalid(format!("input.control_rows[{n}].partition"), "no such partition"));
            }
            let body = c.directive.strip_prefix('r').unwrap_or(&c.directive);
            if pullshuffle::control::Directive::parse(body).is_none() {
                return Err(invalid(format!("input.control_rows[{n}].directive"), format!("unrecognized directive {:?}", c.directive)));
            }
        }
        if self.state_tables.mapper.is_empty() || self.state_tables.mapper == self.state_tables.reducer {
            return Err(invalid("state_tables", "mapper and reducer tables must be distinct, non-empty names"));
        }
        if self.mapper.max_batch_rows == 0 {
            return Err(invalid("mapper.max_batch_rows", "must be at least 1"));
        }
        if self.mapper.trim_period_ms == 0 {
            return Err(invalid("mapper.trim_period_ms", "must be positive"));
        }
        if self.mapper.backoff_ms == 0 || self.reducer.backoff_ms == 0 {
            return Err(invalid(if self.mapper.backoff_ms == 0 { "mapper.backoff_ms" } else { "reducer.backoff_ms" }, "must be positive"));
        }
        if self.reducer.max_rows_per_mapper <= 0 {
            return Err(invalid("reducer.max_rows_per_mapper", "must be positive"));
        }
        let n = &self.network;
        if !(0.0..1.0).contains(&n.drop_probability) {
            return Err(invalid("network.drop_probability", "must be within [0, 1)"));
        }
        if n.latency_min_ms > n.latency_max_ms {
            return Err(invalid("network.latency_min_ms", "exceeds network.latency_max_ms"));
        }
        if n.timeout_ms == 0 {
            return Err(invalid("network.timeout_ms", "must be positive"));
        }
        if self.sample_interval_ms == 0 {
            return Err(invalid("sample_interval_ms", "must be positive"));
        }
        if self.stop.quiet_rounds == 0 {
            return Err(invalid("stop.quiet_rounds", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Mapper(u32),
    Reducer(u32),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Mapper(i) => write!(f, "mapper:{i}"),
            Target::Reducer(i) => write!(f, "reducer:{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    /// Kill the oldest live instance; the controller restarts it later.
    Kill,
    /// Freeze the oldest live instance for `duration_ms`.
    Pause,
    /// Start a second instance with the same index. With `duration_ms` the
    /// newer instance is killed (without restart) after that long.
    Duplicate,
    /// Cut every instance of the target off the network for `duration_ms`.
    Isolate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub at_ms: u64,
    pub action: FaultAction,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    /// Overrides the processor spec's network drop probability when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_drop_probability: Option<f64>,
    /// Overrides the processor spec's latency range when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_delay_ms: Option<(u64, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_unavailability: Option<f64>,
    #[serde(default)]
    pub events: Vec<FaultEvent>,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn from_json(text: &str, spec: &ProcessorSpec) -> Result<Self, SpecError> {
        let plan: FaultPlan = parse(text)?;
        plan.validate(spec)?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn validate(&self, spec: &ProcessorSpec) -> Result<(), SpecError> {
        if let Some(p) = self.message_drop_probability {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid("message_drop_probability", "must be within [0, 1)"));
            }
        }
        if let Some((lo, hi)) = self.delivery_delay_ms {
            if lo > hi {
                return Err(invalid("delivery_delay_ms", "lower bound exceeds upper bound"));
            }
        }
        if let Some(p) = self.store_unavailability {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid("store_unavailability", "must be within [0, 1)"));
            }
        }
        for (n, e) in self.events.iter().enumerate() {
            let (kind, index) = match e.target {
                Target::Mapper(i) => ("mapper", i),
                Target::Reducer(i) => ("reducer", i),
            };
            let count = if kind == "mapper" { spec.mapper_count } else { spec.reducer_count };
            if index >= count {
                return Err(invalid(format!("events[{n}].target"), format!("{kind} {index} does not exist")));
            }
            match (e.action, e.duration_ms) {
                (FaultAction::Pause | FaultAction::Isolate, None) => {
                    return Err(invalid(format!("events[{n}].duration_ms"), "required for pause and isolate"));
                }
                (FaultAction::Kill, Some(_)) => {
                    return Err(invalid(format!("events[{n}].duration_ms"), "not allowed for kill"));
                }
                (_, Some(0)) => return Err(invalid(format!("events[{n}].duration_ms"), "must be positive")),
                _ => {}
            }
        }
        Ok(())
    }

    /// Random kill/pause/duplicate schedule spread over `horizon_ms`.
    pub fn random(spec: &ProcessorSpec, seed: u64, horizon_ms: u64, events: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
        let mut out = Vec::with_capacity(events);
        for _ in 0..events {
            let target = if rng.gen_bool(0.5) {
                Target::Mapper(rng.gen_range(0..spec.mapper_count))
            } else {
                Target::Reducer(rng.gen_range(0..spec.reducer_count))
            };
            let at_ms = rng.gen_range(horizon_ms / 20..horizon_ms.max(horizon_ms / 20 + 1));
            let (action, duration_ms) = match rng.gen_range(0..10) {
                0..=3 => (FaultAction::Kill, None),
                4..=6 => (FaultAction::Pause, Some(rng.gen_range(100..2000))),
                _ => (FaultAction::Duplicate, Some(rng.gen_range(1000..8000))),
            };
            out.push(FaultEvent { at_ms, action, target, duration_ms });
        }
        out.sort_by_key(|e| e.at_ms);
        FaultPlan { events: out, ..FaultPlan::default() }
    }
}
