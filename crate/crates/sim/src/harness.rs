//! Deterministic discrete-event driver for a whole processor.
//!
//! Every worker instance lives inside one event loop on virtual time. The
//! network, discovery, the store and all randomness are seeded from the
//! scenario seed, so `(spec, plan, seed)` fixes the whole run.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pullshuffle::control::Directive;
use pullshuffle::input::{IndexPartitionReader, InputError, OffsetLog, OffsetPartitionReader, PartitionReader};
use pullshuffle::mapper::{mapper_state_schema, spill_table_schema, MapperConfig, MapperRuntime, StepOutcome, TrimOutcome};
use pullshuffle::reducer::{reducer_state_schema, ReducerConfig, ReducerRuntime, RoundOutcome, RoundPlan};
use pullshuffle::row::{Row, Rowset};
use pullshuffle::store::{Journal, Store, StoreError};
use pullshuffle::transport::sim::decode_reply;
use pullshuffle::transport::{Address, Delivery, Discovery, Endpoint, Frame, GetRowsResponse, NetConfig, RpcError, SimNetwork, WorkerKind};
use pullshuffle::{Clock, Guid, ManualClock};

use crate::checker::AtomicityChecker;
use crate::pipeline::{create_output_tables, generate_partition, shuffle_layout, Oracle, ShuffledRow};
use crate::spec::{FaultAction, FaultPlan, ProcessorSpec, SourceKind, SpecError, Target};

pub const SPILL_TABLE: &str = "shuffle_spill";
const MAPPER_GROUP: &str = "mappers";
const REDUCER_GROUP: &str = "reducers";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("store setup failed: {0}")]
    Store(#[from] StoreError),
    #[error("input setup failed: {0}")]
    Input(#[from] InputError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum Status {
    Running,
    Converged { at_ms: u64 },
    Deadlock { at_ms: u64, reason: String },
}

/// Per-mapper-index view at one sampling instant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MapperSample {
    pub window_bytes: u64,
    pub window_entries: usize,
    pub max_entry_bytes: u64,
    /// Next input row the most advanced live instance will read.
    pub read_position: u64,
    /// Rows produced into the partition so far.
    pub head: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub t_ms: u64,
    pub mappers: Vec<MapperSample>,
    /// Persisted committed indexes per reducer index.
    pub reducers: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub started_ms: u64,
    pub finished_ms: u64,
    pub reducer: u32,
    pub outcome: &'static str,
    pub previous: Vec<i64>,
    pub next: Vec<i64>,
    pub advanced: Vec<u32>,
    /// Mapper indexes whose call failed (timeout, unreachable, remote error).
    pub failed: Vec<u32>,
    pub rows: u64,
}

/// Counters collected by the driver across all instances, dead ones included.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub events_processed: u64,
    pub faults_applied: u64,
    pub directives_fired: u64,
    pub restarts: BTreeMap<String, u64>,
    pub mapper_split_brains: u64,
    pub reducer_split_brain_skips: u64,
    pub reducer_rounds: u64,
    pub reducer_commits: u64,
    pub mapper_state_commits: u64,
    /// Commits made while another instance of the same index had committed
    /// since this instance last looked at its state row.
    pub stale_view_commits: u64,
    /// State commits made by instances started as duplicates.
    pub duplicate_instance_commits: u64,
    pub max_window_bytes: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
enum Event {
    Produce { partition: u32 },
    Bootstrap { addr: Address, epoch: u64 },
    Ingest { addr: Address, epoch: u64 },
    TrimTimer { addr: Address, epoch: u64 },
    RoundStart { addr: Address, epoch: u64 },
    RpcArrive { mapper: Address, reducer: Address, round: u64, index: u32, request: Vec<u8>, back: Option<u64> },
    RpcReply { reducer: Address, round: u64, index: u32, reply: Vec<u8> },
    RpcDeadline { reducer: Address, round: u64, index: u32 },
    CompleteDeferred { addr: Address, epoch: u64 },
    Fault(usize),
    Respawn { target: Target },
    Resume { addr: Address },
    KillNoRespawn { addr: Address },
    Rejoin { target: Target },
    Sample,
}

impl Event {
    /// Instance whose freeze delays this event.
    fn subject(&self) -> Option<Address> {
        match *self {
            Event::Bootstrap { addr, .. }
            | Event::Ingest { addr, .. }
            | Event::TrimTimer { addr, .. }
            | Event::RoundStart { addr, .. }
            | Event::CompleteDeferred { addr, .. } => Some(addr),
            Event::RpcArrive { mapper, .. } => Some(mapper),
            Event::RpcReply { reducer, .. } | Event::RpcDeadline { reducer, .. } => Some(reducer),
            _ => None,
        }
    }

    fn is_control(&self) -> bool {
        matches!(self, Event::Fault(_) | Event::Respawn { .. } | Event::Resume { .. } | Event::KillNoRespawn { .. } | Event::Rejoin { .. })
    }
}

struct InFlight {
    id: u64,
    started_ms: u64,
    plan: RoundPlan,
    pending: BTreeSet<u32>,
    responses: BTreeMap<u32, Result<GetRowsResponse, RpcError>>,
}

enum Runtime {
    Mapper(MapperRuntime),
    Reducer(ReducerRuntime),
}

struct Instance {
    target: Target,
    guid: Guid,
    runtime: Runtime,
    paused_until: Option<u64>,
    deferred: Vec<Event>,
    epoch: u64,
    duplicate: bool,
    round: Option<InFlight>,
    rounds_started: u64,
    quiet: u32,
    view_seq: u64,
}

enum Source {
    Table(String),
    Log(OffsetLog),
}

struct Producer {
    source: Source,
    cursor: usize,
    batches: u64,
}

pub struct Simulation {
    spec: ProcessorSpec,
    plan: FaultPlan,
    seed: u64,
    clock: ManualClock,
    store: Store,
    discovery: Discovery,
    net: SimNetwork,
    guid_rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), Event>,
    next_seq: u64,
    next_address: u64,
    instances: BTreeMap<Address, Instance>,
    producers: Vec<Producer>,
    inputs: Vec<Vec<Row>>,
    oracle: Oracle,
    layouts: Vec<Vec<ShuffledRow>>,
    fired: BTreeSet<(Target, u64)>,
    isolated: BTreeSet<Target>,
    commit_counters: BTreeMap<Target, u64>,
    pending_control: usize,
    checker: AtomicityChecker,
    samples: Vec<Sample>,
    rounds: Vec<RoundRecord>,
    counters: Counters,
    status: Status,
}

impl Simulation {
    pub fn new(spec: ProcessorSpec, plan: FaultPlan, seed: u64) -> Result<Self, HarnessError> {
        Self::with_journal(spec, plan, seed, Journal::counting())
    }

    pub fn with_journal(spec: ProcessorSpec, plan: FaultPlan, seed: u64, journal: Journal) -> Result<Self, HarnessError> {
        spec.validate()?;
        plan.validate(&spec)?;
        let clock = ManualClock::new();
        let shared_clock: Arc<dyn Clock> = Arc::new(clock.clone());
        let store = Store::new();
        store.enable_journal(journal);
        store.create_sorted_table(&spec.state_tables.mapper, mapper_state_schema())?;
        store.create_sorted_table(&spec.state_tables.reducer, reducer_state_schema())?;
        if spec.strawman_spill {
            store.create_sorted_table(SPILL_TABLE, spill_table_schema())?;
        }
        create_output_tables(&store, spec.pipeline)?;

        let inputs: Vec<Vec<Row>> =
            (0..spec.mapper_count).map(|p| generate_partition(spec.pipeline, &spec.input, spec.mapper_count, p, seed)).collect();
        let oracle = Oracle::compute(spec.pipeline, &inputs);
        let layouts: Vec<Vec<ShuffledRow>> = inputs.iter().map(|rows| shuffle_layout(spec.pipeline, rows, spec.reducer_count)).collect();
        let checker = AtomicityChecker::install(
            &store,
            &spec.state_tables.reducer,
            spec.mapper_count,
            layouts.clone(),
            spec.pipeline.supports_control_rows(),
        );

        let mut producers = Vec::new();
        for p in 0..spec.mapper_count {
            let source = match spec.input.kind {
                SourceKind::OrderedTable => {
                    let name = format!("input_{p}");
                    store.create_ordered_table(&name, spec.pipeline.input_names())?;
                    Source::Table(name)
                }
                SourceKind::OffsetLog => Source::Log(OffsetLog::new(
                    spec.pipeline.input_names(),
                    spec.input.substreams,
                    seed ^ (0x0ff5_e700 + p as u64),
                )),
            };
            producers.push(Producer { source, cursor: 0, batches: 0 });
        }

        let mut net_config = NetConfig {
            drop_probability: spec.network.drop_probability,
            latency_min_ms: spec.network.latency_min_ms,
            latency_max_ms: spec.network.latency_max_ms,
            timeout_ms: spec.network.timeout_ms,
        };
        if let Some(p) = plan.message_drop_probability {
            net_config.drop_probability = p;
        }
        if let Some((lo, hi)) = plan.delivery_delay_ms {
            net_config.latency_min_ms = lo;
            net_config.latency_max_ms = hi;
        }
        if let Some(rate) = plan.store_unavailability {
            store.set_unavailability(rate, seed ^ 0x5107_e000);
        }

        let mut sim = Simulation {
            discovery: Discovery::new(spec.discovery_delay_ms, shared_clock),
            net: SimNetwork::new(net_config, seed ^ 0x0e70_0000),
            guid_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a1d_0000),
            spec,
            plan,
            seed,
            clock,
            store,
            queue: BTreeMap::new(),
            next_seq: 0,
            next_address: 1,
            instances: BTreeMap::new(),
            producers,
            inputs,
            oracle,
            layouts,
            fired: BTreeSet::new(),
            isolated: BTreeSet::new(),
            commit_counters: BTreeMap::new(),
            pending_control: 0,
            checker,
            samples: Vec::new(),
            rounds: Vec::new(),
            counters: Counters::default(),
            status: Status::Running,
        };
        for p in 0..sim.spec.mapper_count {
            sim.schedule(0, Event::Produce { partition: p });
        }
        for m in 0..sim.spec.mapper_count {
            sim.spawn(Target::Mapper(m), false);
        }
        for r in 0..sim.spec.reducer_count {
            sim.spawn(Target::Reducer(r), false);
        }
        for (n, e) in sim.plan.events.clone().iter().enumerate() {
            sim.schedule(e.at_ms, Event::Fault(n));
        }
        sim.schedule(0, Event::Sample);
        Ok(sim)
    }

    pub fn spec(&self) -> &ProcessorSpec {
        &self.spec
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn status(&self) -> &Status {
        &self.status
    }

    pub fn inputs(&self) -> &[Vec<Row>] {
        &self.inputs
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn layouts(&self) -> &[Vec<ShuffledRow>] {
        &self.layouts
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn atomicity_violations(&self) -> Vec<String> {
        self.checker.violations()
    }

    /// Live instances of `target`, oldest first.
    pub fn instances_of(&self, target: Target) -> Vec<Guid> {
        self.instances.values().filter(|i| i.target == target).map(|i| i.guid).collect()
    }

    /// Checks the window invariants of every running mapper instance.
    pub fn check_mapper_invariants(&self) -> Result<(), String> {
        for inst in self.instances.values() {
            if let Runtime::Mapper(rt) = &inst.runtime {
                rt.check_invariants().map_err(|e| format!("{}: {e}", inst.target))?;
            }
        }
        Ok(())
    }

    /// Runs until convergence or deadlock.
    pub fn run(&mut self) -> &Status {
        while self.status == Status::Running {
            self.step(None);
        }
        &self.status
    }

    /// Runs every event due at or before `t_ms`, then parks the clock there.
    pub fn run_until(&mut self, t_ms: u64) -> &Status {
        while self.status == Status::Running && self.step(Some(t_ms)) {}
        if self.status == Status::Running && self.clock.now_ms() < t_ms {
            self.clock.set(t_ms);
        }
        &self.status
    }

    /// Handles one event. Returns false if the next event lies past `limit`.
    fn step(&mut self, limit: Option<u64>) -> bool {
        let Some((&(t, seq), _)) = self.queue.first_key_value() else {
            self.status = Status::Deadlock { at_ms: self.now_ms(), reason: "event queue drained".into() };
            return false;
        };
        if limit.is_some_and(|l| t > l) {
            return false;
        }
        if t > self.spec.stop.max_virtual_ms {
            self.status = Status::Deadlock {
                at_ms: self.now_ms(),
                reason: format!("no quiescence within {} ms of virtual time", self.spec.stop.max_virtual_ms),
            };
            return false;
        }
        let event = self.queue.remove(&(t, seq)).expect("key just observed");
        self.clock.set(t);
        if event.is_control() {
            self.pending_control -= 1;
        }
        self.counters.events_processed += 1;
        self.dispatch(event);
        if self.converged() {
            self.status = Status::Converged { at_ms: t };
        }
        true
    }

    fn schedule(&mut self, at: u64, event: Event) {
        if event.is_control() {
            self.pending_control += 1;
        }
        self.queue.insert((at, self.next_seq), event);
        self.next_seq += 1;
    }

    fn after(&mut self, delay: u64, event: Event) {
        self.schedule(self.now_ms() + delay, event);
    }

    fn dispatch(&mut self, event: Event) {
        if let Some(addr) = event.subject() {
            match self.instances.get_mut(&addr) {
                None => return,
                Some(inst) if inst.paused_until.is_some() => {
                    inst.deferred.push(event);
                    return;
                }
                Some(_) => {}
            }
        }
        match event {
            Event::Produce { partition } => self.produce(partition),
            Event::Bootstrap { addr, epoch } => self.bootstrap(addr, epoch),
            Event::Ingest { addr, epoch } => self.ingest(addr, epoch),
            Event::TrimTimer { addr, epoch } => self.trim_timer(addr, epoch),
            Event::RoundStart { addr, epoch } => self.round_start(addr, epoch),
            Event::RpcArrive { mapper, reducer, round, index, request, back } => {
                self.rpc_arrive(mapper, reducer, round, index, &request, back)
            }
            Event::RpcReply { reducer, round, index, reply } => self.settle(reducer, round, index, decode_reply(&reply)),
            Event::RpcDeadline { reducer, round, index } => self.settle(reducer, round, index, Err(RpcError::Timeout)),
            Event::CompleteDeferred { addr, epoch } => self.complete_deferred(addr, epoch),
            Event::Fault(n) => self.apply_fault(n),
            Event::Respawn { target } => {
                self.spawn(target, false);
            }
            Event::Resume { addr } => self.resume(addr),
            Event::KillNoRespawn { addr } => self.kill(addr, false),
            Event::Rejoin { target } => {
                self.isolated.remove(&target);
                let addrs: Vec<Address> = self.instances.iter().filter(|(_, i)| i.target == target).map(|(a, _)| *a).collect();
                for a in addrs {
                    self.net.rejoin(a);
                }
            }
            Event::Sample => {
                self.take_sample();
                self.after(self.spec.sample_interval_ms, Event::Sample);
            }
        }
    }

    fn produce(&mut self, partition: u32) {
        let batch_rows = self.spec.input.append_batch_rows as usize;
        let rows = &self.inputs[partition as usize];
        let producer = &mut self.producers[partition as usize];
        let end = (producer.cursor + batch_rows).min(rows.len());
        let batch = Rowset::new(self.spec.pipeline.input_names(), rows[producer.cursor..end].to_vec()).expect("generated rows match their schema");
        let appended = match &producer.source {
            Source::Table(name) => self.store.append_rows(name, &batch).is_ok(),
            Source::Log(log) => log.append(producer.batches as usize % log.substreams(), &batch).is_ok(),
        };
        if appended {
            producer.cursor = end;
            producer.batches += 1;
        }
        if producer.cursor < rows.len() {
            self.after(self.spec.input.append_interval_ms.max(1), Event::Produce { partition });
        }
    }

    fn spawn(&mut self, target: Target, duplicate: bool) -> Address {
        let addr = Address(self.next_address);
        self.next_address += 1;
        let guid = Guid::random(&mut self.guid_rng);
        let clock: Arc<dyn Clock> = Arc::new(self.clock.clone());
        let (runtime, kind, index, group) = match target {
            Target::Mapper(m) => {
                let trim_delay = self.spec.input.trim_delay_ms;
                let reader: Box<dyn PartitionReader> = match &self.producers[m as usize].source {
                    Source::Table(name) => Box::new(
                        IndexPartitionReader::new(self.store.clone(), name).expect("input table exists").with_trim_delay(trim_delay, clock),
                    ),
                    Source::Log(log) => Box::new(OffsetPartitionReader::new(log.clone()).with_trim_delay(trim_delay, clock)),
                };
                let s = &self.spec.mapper;
                let mut config = MapperConfig::new(m, self.spec.reducer_count, self.spec.state_tables.mapper.clone());
                config.max_batch_rows = s.max_batch_rows;
                config.memory_limit_bytes = s.memory_limit_bytes;
                config.backoff_ms = s.backoff_ms;
                config.split_brain_delay_ms = s.split_brain_delay_ms;
                config.trim_period_ms = s.trim_period_ms;
                config.spill_table = self.spec.strawman_spill.then(|| SPILL_TABLE.to_string());
                let rt = MapperRuntime::new(config, guid, self.store.clone(), reader, self.spec.pipeline.mapper(self.spec.reducer_count));
                (Runtime::Mapper(rt), WorkerKind::Mapper, m, MAPPER_GROUP)
            }
            Target::Reducer(r) => {
                let s = &self.spec.reducer;
                let mut config = ReducerConfig::new(r, self.spec.mapper_count, self.spec.state_tables.reducer.clone());
                config.max_rows_per_mapper = s.max_rows_per_mapper;
                config.backoff_ms = s.backoff_ms;
                config.commit_order = s.commit_order.into();
                let rt = ReducerRuntime::new(config, guid, self.store.clone(), self.spec.pipeline.reducer());
                (Runtime::Reducer(rt), WorkerKind::Reducer, r, REDUCER_GROUP)
            }
        };
        self.discovery.register(group, Endpoint { kind, index, guid, address: addr }, BTreeMap::new());
        if self.isolated.contains(&target) {
            self.net.isolate(addr);
        }
        self.instances.insert(
            addr,
            Instance {
                target,
                guid,
                runtime,
                paused_until: None,
                deferred: Vec::new(),
                epoch: 0,
                duplicate,
                round: None,
                rounds_started: 0,
                quiet: 0,
                view_seq: 0,
            },
        );
        match target {
            Target::Mapper(_) => self.after(0, Event::Bootstrap { addr, epoch: 0 }),
            Target::Reducer(_) => self.after(0, Event::RoundStart { addr, epoch: 0 }),
        }
        addr
    }

    fn kill(&mut self, addr: Address, respawn: bool) {
        let Some(inst) = self.instances.remove(&addr) else { return };
        self.net.set_down(addr, true);
        let group = match inst.target {
            Target::Mapper(_) => MAPPER_GROUP,
            Target::Reducer(_) => REDUCER_GROUP,
        };
        self.discovery.deregister(group, inst.guid);
        if respawn {
            *self.counters.restarts.entry(inst.target.to_string()).or_default() += 1;
            self.after(self.spec.restart_delay_ms, Event::Respawn { target: inst.target });
        }
    }

    fn pause(&mut self, addr: Address, duration: u64) {
        let until = self.now_ms() + duration;
        let Some(inst) = self.instances.get_mut(&addr) else { return };
        inst.paused_until = Some(inst.paused_until.map_or(until, |u| u.max(until)));
        self.schedule(until, Event::Resume { addr });
    }

    fn resume(&mut self, addr: Address) {
        let now = self.now_ms();
        let Some(inst) = self.instances.get_mut(&addr) else { return };
        if inst.paused_until.is_some_and(|u| u > now) {
            return;
        }
        inst.paused_until = None;
        for event in std::mem::take(&mut inst.deferred) {
            self.schedule(now, event);
        }
    }

    fn oldest(&self, target: Target) -> Option<Address> {
        self.instances.iter().find(|(_, i)| i.target == target).map(|(a, _)| *a)
    }

    fn apply_fault(&mut self, n: usize) {
        let event = self.plan.events[n].clone();
        self.counters.faults_applied += 1;
        match event.action {
            FaultAction::Kill => {
                if let Some(addr) = self.oldest(event.target) {
                    self.kill(addr, true);
                }
            }
            FaultAction::Pause => {
                if let Some(addr) = self.oldest(event.target) {
                    self.pause(addr, event.duration_ms.unwrap_or_default());
                }
            }
            FaultAction::Duplicate => {
                let addr = self.spawn(event.target, true);
                if let Some(d) = event.duration_ms {
                    self.after(d, Event::KillNoRespawn { addr });
                }
            }
            FaultAction::Isolate => {
                self.isolated.insert(event.target);
                let addrs: Vec<Address> = self.instances.iter().filter(|(_, i)| i.target == event.target).map(|(a, _)| *a).collect();
                for a in addrs {
                    self.net.isolate(a);
                }
                self.after(event.duration_ms.unwrap_or_default(), Event::Rejoin { target: event.target });
            }
        }
    }

    fn apply_directives(&mut self, target: Target, addr: Address, directives: Vec<(u64, Directive)>) {
        for (position, directive) in directives {
            if !self.fired.insert((target, position)) {
                continue;
            }
            self.counters.directives_fired += 1;
            match directive {
                Directive::Pause { ms } => self.pause(addr, ms),
                Directive::Crash => self.kill(addr, true),
            }
        }
    }

    /// Books a state commit by the instance at `addr`.
    fn note_commit(&mut self, addr: Address) {
        let inst = self.instances.get_mut(&addr).expect("committing instance is live");
        let counter = self.commit_counters.entry(inst.target).or_default();
        if *counter != inst.view_seq {
            self.counters.stale_view_commits += 1;
        }
        if inst.duplicate {
            self.counters.duplicate_instance_commits += 1;
        }
        *counter += 1;
        inst.view_seq = *counter;
    }

    fn view(&mut self, addr: Address) {
        let inst = self.instances.get_mut(&addr).expect("instance is live");
        inst.view_seq = self.commit_counters.get(&inst.target).copied().unwrap_or(0);
    }

    fn mapper_mut(&mut self, addr: Address, epoch: u64) -> Option<&mut MapperRuntime> {
        match self.instances.get_mut(&addr) {
            Some(Instance { runtime: Runtime::Mapper(rt), epoch: e, .. }) if *e == epoch => Some(rt),
            _ => None,
        }
    }

    fn split_brain(&mut self, addr: Address) {
        self.counters.mapper_split_brains += 1;
        let inst = self.instances.get_mut(&addr).expect("instance is live");
        inst.epoch += 1;
        let epoch = inst.epoch;
        self.after(self.spec.mapper.split_brain_delay_ms, Event::Bootstrap { addr, epoch });
    }

    fn bootstrap(&mut self, addr: Address, epoch: u64) {
        let Some(rt) = self.mapper_mut(addr, epoch) else { return };
        match rt.bootstrap() {
            Ok(()) => {
                self.view(addr);
                let inst = self.instances.get_mut(&addr).expect("instance is live");
                inst.epoch += 1;
                let epoch = inst.epoch;
                self.after(0, Event::Ingest { addr, epoch });
                self.after(self.spec.mapper.trim_period_ms, Event::TrimTimer { addr, epoch });
            }
            Err(_) => self.after(self.spec.mapper.backoff_ms, Event::Bootstrap { addr, epoch }),
        }
    }

    fn ingest(&mut self, addr: Address, epoch: u64) {
        let Some(rt) = self.mapper_mut(addr, epoch) else { return };
        let outcome = rt.ingestion_step();
        let (index, usage) = (rt.config().mapper_index, rt.memory_usage());
        let peak = self.counters.max_window_bytes.entry(Target::Mapper(index).to_string()).or_default();
        *peak = (*peak).max(usage);
        let backoff = self.spec.mapper.backoff_ms;
        match outcome {
            Ok(StepOutcome::Appended { directives, .. }) => {
                self.after(self.spec.mapper.step_cost_ms, Event::Ingest { addr, epoch });
                self.apply_directives(Target::Mapper(index), addr, directives);
            }
            Ok(StepOutcome::SplitBrainRestart) => self.split_brain(addr),
            Ok(StepOutcome::Empty | StepOutcome::TransientError(_) | StepOutcome::MemoryBlocked) | Err(_) => {
                self.after(backoff, Event::Ingest { addr, epoch })
            }
        }
    }

    fn trim_timer(&mut self, addr: Address, epoch: u64) {
        let Some(rt) = self.mapper_mut(addr, epoch) else { return };
        let before = rt.stats().state_commits;
        let outcome = rt.trim_input_rows();
        let committed = rt.stats().state_commits > before;
        if committed {
            self.counters.mapper_state_commits += 1;
            self.note_commit(addr);
        }
        match outcome {
            TrimOutcome::SplitBrainDetected => self.split_brain(addr),
            TrimOutcome::Advanced | TrimOutcome::NoProgress => {
                self.after(self.spec.mapper.trim_period_ms, Event::TrimTimer { addr, epoch })
            }
        }
    }

    fn rpc_arrive(&mut self, mapper: Address, reducer: Address, round: u64, index: u32, request: &[u8], back: Option<u64>) {
        let Some(Instance { runtime: Runtime::Mapper(rt), .. }) = self.instances.get_mut(&mapper) else { return };
        let reply = match Frame::decode(request) {
            Ok(Frame::Request(req)) => match rt.handle_get_rows(&req) {
                Ok(rsp) => Frame::Response(rsp),
                Err(e) => Frame::Error { code: e.code(), message: e.to_string() },
            },
            Ok(_) => Frame::Error { code: 3, message: "expected a request frame".into() },
            Err(e) => Frame::Error { code: 3, message: e.to_string() },
        };
        if let Some(back) = back {
            self.after(back, Event::RpcReply { reducer, round, index, reply: reply.encode() });
        }
    }

    fn round_start(&mut self, addr: Address, epoch: u64) {
        let now = self.now_ms();
        let Some(Instance { runtime: Runtime::Reducer(rt), epoch: e, round, .. }) = self.instances.get_mut(&addr) else { return };
        if *e != epoch || round.is_some() {
            return;
        }
        self.counters.reducer_rounds += 1;
        let plan = match rt.begin_round() {
            Ok(plan) => plan,
            Err(outcome) => {
                self.schedule_next_round(addr, &outcome);
                return;
            }
        };
        self.view(addr);
        let inst = self.instances.get_mut(&addr).expect("instance is live");
        let id = inst.rounds_started;
        inst.rounds_started += 1;

        let listing = self.discovery.list(MAPPER_GROUP);
        let timeout = self.net.config().timeout_ms;
        let mut pending = BTreeSet::new();
        let mut responses = BTreeMap::new();
        for m in plan.mappers().collect::<Vec<_>>() {
            let candidates: Vec<&Endpoint> = listing.iter().map(|(e, _)| e).filter(|e| e.kind == WorkerKind::Mapper && e.index == m).collect();
            if candidates.is_empty() {
                responses.insert(m, Err(RpcError::Unreachable));
                continue;
            }
            let pick = candidates[(id % candidates.len() as u64) as usize].clone();
            let request = Frame::Request(plan.request(m, pick.guid)).encode();
            let arrive = |back| Event::RpcArrive { mapper: pick.address, reducer: addr, round: id, index: m, request: request.clone(), back };
            match self.net.plan(addr, pick.address) {
                Delivery::Unreachable => {
                    responses.insert(m, Err(RpcError::Unreachable));
                    continue;
                }
                Delivery::RequestLost => {}
                Delivery::ResponseLost { there } => self.after(there, arrive(None)),
                Delivery::Deliver { there, back } => self.after(there, arrive(Some(back))),
            }
            pending.insert(m);
            self.after(timeout, Event::RpcDeadline { reducer: addr, round: id, index: m });
        }
        let inst = self.instances.get_mut(&addr).expect("instance is live");
        inst.round = Some(InFlight { id, started_ms: now, plan, pending, responses });
        if inst.round.as_ref().is_some_and(|r| r.pending.is_empty()) {
            self.finish_round(addr);
        }
    }

    fn settle(&mut self, reducer: Address, round: u64, index: u32, result: Result<GetRowsResponse, RpcError>) {
        let Some(inst) = self.instances.get_mut(&reducer) else { return };
        let Some(flight) = inst.round.as_mut().filter(|f| f.id == round) else { return };
        if !flight.pending.remove(&index) {
            return;
        }
        flight.responses.insert(index, result);
        if flight.pending.is_empty() {
            self.finish_round(reducer);
        }
    }

    fn finish_round(&mut self, addr: Address) {
        let now = self.now_ms();
        let inst = self.instances.get_mut(&addr).expect("instance is live");
        let flight = inst.round.take().expect("round in flight");
        let Runtime::Reducer(rt) = &mut inst.runtime else { unreachable!("rounds run on reducers") };
        let index = rt.config().reducer_index;
        let failed: Vec<u32> = flight.responses.iter().filter(|(_, r)| r.is_err()).map(|(m, _)| *m).collect();
        let commits = rt.stats().commits;
        let report = rt.finish_round(flight.plan, flight.responses);
        let committed = rt.stats().commits > commits;
        self.rounds.push(RoundRecord {
            started_ms: flight.started_ms,
            finished_ms: now,
            reducer: index,
            outcome: outcome_name(&report.outcome),
            previous: report.previous.committed_row_indices.clone(),
            next: report.next.committed_row_indices.clone(),
            advanced: report.advanced.clone(),
            failed,
            rows: report.rows,
        });
        if committed {
            self.counters.reducer_commits += 1;
            self.note_commit(addr);
        }
        self.schedule_next_round(addr, &report.outcome);
        self.apply_directives(Target::Reducer(index), addr, report.directives);
    }

    fn complete_deferred(&mut self, addr: Address, epoch: u64) {
        let Some(Instance { runtime: Runtime::Reducer(rt), epoch: e, .. }) = self.instances.get_mut(&addr) else { return };
        if *e != epoch {
            return;
        }
        let commits = rt.stats().commits;
        let outcome = rt.complete_deferred().unwrap_or(RoundOutcome::NothingToDo);
        if rt.stats().commits > commits {
            self.counters.reducer_commits += 1;
            self.note_commit(addr);
        }
        self.schedule_next_round(addr, &outcome);
    }

    fn schedule_next_round(&mut self, addr: Address, outcome: &RoundOutcome) {
        let inst = self.instances.get_mut(&addr).expect("instance is live");
        let epoch = inst.epoch;
        let backoff = self.spec.reducer.backoff_ms;
        match outcome {
            RoundOutcome::Committed => {
                inst.quiet = 0;
                self.after(1, Event::RoundStart { addr, epoch });
            }
            RoundOutcome::NothingToDo => {
                inst.quiet += 1;
                self.after(backoff, Event::RoundStart { addr, epoch });
            }
            RoundOutcome::SplitBrainSkip => {
                self.counters.reducer_split_brain_skips += 1;
                self.after(backoff, Event::RoundStart { addr, epoch });
            }
            RoundOutcome::TransientError(_) => self.after(backoff, Event::RoundStart { addr, epoch }),
            RoundOutcome::Deferred => self.after(self.spec.reducer.deferred_gap_ms, Event::CompleteDeferred { addr, epoch }),
        }
    }

    fn take_sample(&mut self) {
        let mut mappers = Vec::new();
        for m in 0..self.spec.mapper_count {
            let mut sample = MapperSample {
                window_bytes: 0,
                window_entries: 0,
                max_entry_bytes: 0,
                read_position: 0,
                head: self.producers[m as usize].cursor as u64,
            };
            for inst in self.instances.values().filter(|i| i.target == Target::Mapper(m)) {
                if let Runtime::Mapper(rt) = &inst.runtime {
                    sample.window_bytes = sample.window_bytes.max(rt.memory_usage());
                    sample.window_entries = sample.window_entries.max(rt.window().len());
                    sample.max_entry_bytes = sample.max_entry_bytes.max(rt.window().iter().map(|e| e.bytes).max().unwrap_or(0));
                    sample.read_position = sample.read_position.max(rt.input_cursor());
                }
            }
            mappers.push(sample);
        }
        let reducers = (0..self.spec.reducer_count).map(|r| self.persisted_reducer_state(r)).collect();
        self.samples.push(Sample { t_ms: self.now_ms(), mappers, reducers });
    }

    /// Committed indexes of reducer `r` as stored.
    pub fn persisted_reducer_state(&self, r: u32) -> Vec<i64> {
        let key = [pullshuffle::row::Value::Int64(r as i64)];
        let row = self.store.get(&self.spec.state_tables.reducer, &key).ok().flatten();
        pullshuffle::reducer::ReducerState::from_row(row.as_ref(), self.spec.mapper_count)
            .map(|s| s.committed_row_indices)
            .unwrap_or_default()
    }

    /// True once partition `p` has been fully produced and trimmed.
    pub fn partition_drained(&self, p: u32) -> bool {
        let producer = &self.producers[p as usize];
        let total = self.inputs[p as usize].len();
        if producer.cursor < total {
            return false;
        }
        match &producer.source {
            Source::Table(name) => self.store.ordered_bounds(name).is_ok_and(|(begin, end)| begin == total as u64 && end == total as u64),
            Source::Log(log) => log.retained() == 0,
        }
    }

    fn converged(&self) -> bool {
        if self.pending_control > 0 || !(0..self.spec.mapper_count).all(|p| self.partition_drained(p)) {
            return false;
        }
        let k = self.spec.stop.quiet_rounds;
        for r in 0..self.spec.reducer_count {
            let mut any = false;
            for inst in self.instances.values().filter(|i| i.target == Target::Reducer(r)) {
                any = true;
                let Runtime::Reducer(rt) = &inst.runtime else { unreachable!() };
                if inst.quiet < k || rt.has_deferred() {
                    return false;
                }
            }
            if !any {
                return false;
            }
        }
        self.instances.values().all(|i| i.paused_until.is_none())
    }
}

fn outcome_name(outcome: &RoundOutcome) -> &'static str {
    match outcome {
        RoundOutcome::Committed => "committed",
        RoundOutcome::NothingToDo => "nothing_to_do",
        RoundOutcome::SplitBrainSkip => "split_brain_skip",
        RoundOutcome::TransientError(_) => "transient_error",
        RoundOutcome::Deferred => "deferred",
    }
}
