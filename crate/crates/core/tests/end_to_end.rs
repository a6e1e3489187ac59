//! Mappers and reducers wired together over the simulated network and over
//! real sockets, checked against a word count computed directly from the
//! input.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pullshuffle::input::IndexPartitionReader;
use pullshuffle::mapper::{mapper_state_schema, partition_by_hash, MapContext, MapError, Mapper, MapperConfig, MapperRuntime};
use pullshuffle::reducer::{reducer_state_schema, ReduceContext, Reducer, ReducerConfig, ReducerRuntime, RoundOutcome};
use pullshuffle::row::{NameTable, Row, Rowset, Value};
use pullshuffle::store::{SortedSchema, Store};
use pullshuffle::transport::live::{self, LiveServer};
use pullshuffle::transport::{Address, Discovery, Endpoint, GetRowsRequest, NetConfig, RpcError, SimNetwork, WorkerKind};
use pullshuffle::{Guid, ManualClock};

const MAPPERS: u32 = 2;
const REDUCERS: u32 = 2;
const ROWS: usize = 400;
const CHUNK: usize = 25;
const BATCH: i64 = 64;

fn names() -> NameTable {
    NameTable::from_names(["key"]).unwrap()
}

fn words(seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..MAPPERS).map(|_| (0..ROWS).map(|_| format!("w{}", rng.gen_range(0..40))).collect()).collect()
}

fn expected(words: &[Vec<String>]) -> BTreeMap<String, i64> {
    let mut counts = BTreeMap::new();
    for w in words.iter().flatten() {
        *counts.entry(w.clone()).or_insert(0) += 1;
    }
    counts
}

fn setup() -> Store {
    let store = Store::new();
    store.create_sorted_table("mapper_state", mapper_state_schema()).unwrap();
    store.create_sorted_table("reducer_state", reducer_state_schema()).unwrap();
    store.create_sorted_table("counts", SortedSchema::new(NameTable::from_names(["key", "n"]).unwrap(), 1)).unwrap();
    for m in 0..MAPPERS {
        store.create_ordered_table(&format!("input_{m}"), names()).unwrap();
    }
    store
}

fn append_chunk(store: &Store, words: &[Vec<String>], chunk: usize) {
    for (m, list) in words.iter().enumerate() {
        let rows = list.iter().skip(chunk * CHUNK).take(CHUNK).map(|w| Row::new(vec![Value::str(w)])).collect();
        store.append_rows(&format!("input_{m}"), &Rowset::new(names(), rows).unwrap()).unwrap();
    }
}

fn mapper(store: &Store, index: u32, guid: u128) -> MapperRuntime {
    let mut config = MapperConfig::new(index, REDUCERS, "mapper_state");
    config.max_batch_rows = 40;
    let reader = IndexPartitionReader::new(store.clone(), &format!("input_{index}")).unwrap();
    let map: Box<dyn Mapper> = Box::new(|input: &Rowset, _: &mut MapContext| {
        partition_by_hash(input.clone(), &["key"], REDUCERS).map_err(|e| MapError::Failed(e.to_string()))
    });
    let mut rt = MapperRuntime::new(config, Guid(guid), store.clone(), Box::new(reader), map);
    rt.bootstrap().unwrap();
    rt
}

fn reducer(store: &Store, index: u32) -> ReducerRuntime {
    let mut config = ReducerConfig::new(index, MAPPERS, "reducer_state");
    config.max_rows_per_mapper = BATCH;
    let count: Box<dyn Reducer> = Box::new(|store: &Store, batch: &Rowset, _: &mut ReduceContext| {
        let mut tx = store.begin();
        for row in batch.rows() {
            let key = row.get(0).clone();
            let n = tx.read("counts", std::slice::from_ref(&key))?.map_or(0, |r| r.get(1).as_i64().unwrap());
            tx.write("counts", Row::new(vec![key, Value::Int64(n + 1)]))?;
        }
        Ok(Some(tx))
    });
    ReducerRuntime::new(config, Guid(10_000 + index as u128), store.clone(), count)
}

fn counts(store: &Store) -> BTreeMap<String, i64> {
    store
        .dump_sorted("counts")
        .unwrap()
        .iter()
        .map(|r| (r.get(0).as_str().unwrap().to_string(), r.get(1).as_i64().unwrap()))
        .collect()
}

fn request(reducer: u32, committed: i64, mapper_id: Guid) -> GetRowsRequest {
    GetRowsRequest { count: BATCH, reducer_index: reducer as i64, committed_row_index: committed, mapper_id }
}

fn endpoint(index: u32, guid: u128) -> Endpoint {
    Endpoint { kind: WorkerKind::Mapper, index, guid: Guid(guid), address: Address(guid as u64) }
}

#[test]
fn lossy_simulated_network_with_mapper_restart() {
    for seed in 0..8 {
        let words = words(seed);
        let store = setup();
        let clock = ManualClock::new();
        let discovery = Discovery::new(5, Arc::new(clock.clone()));
        let mut net = SimNetwork::new(NetConfig { drop_probability: 0.2, ..NetConfig::default() }, seed);
        let mut mappers: Vec<MapperRuntime> = (0..MAPPERS).map(|m| mapper(&store, m, m as u128 + 1)).collect();
        for m in 0..MAPPERS {
            discovery.register("mappers", endpoint(m, m as u128 + 1), Default::default());
        }
        let mut reducers: Vec<ReducerRuntime> = (0..REDUCERS).map(|r| reducer(&store, r)).collect();
        clock.advance(10);

        let (mut quiet, mut tick) = (0, 0);
        while quiet < 3 {
            tick += 1;
            assert!(tick < 5_000, "seed {seed} did not converge");
            clock.advance(1);
            if tick % 2 == 0 && tick / 2 <= ROWS / CHUNK {
                append_chunk(&store, &words, tick / 2 - 1);
            }
            if tick == 17 {
                let old = mappers[1].id();
                mappers[1] = mapper(&store, 1, 99);
                discovery.deregister("mappers", old);
                discovery.register("mappers", endpoint(1, 99), Default::default());
            }
            for m in mappers.iter_mut() {
                let _ = m.ingestion_step().unwrap();
                if tick % 7 == 0 {
                    m.trim_input_rows();
                }
                m.check_invariants().unwrap();
            }
            let view = discovery.list("mappers");
            let mut all_idle = tick / 2 > ROWS / CHUNK;
            for r in reducers.iter_mut() {
                let index = r.config().reducer_index;
                let report = r.step(|m, committed| {
                    let ep = view.iter().rev().find(|(e, _)| e.index == m)?.0.clone();
                    let target = &mut mappers[m as usize];
                    let req = request(index, committed, ep.guid);
                    if target.id() != ep.guid {
                        return Some(Err(RpcError::Unreachable));
                    }
                    Some(net.call(Address(5_000), ep.address, &req, |req| target.handle_get_rows(&req)).0)
                });
                all_idle &= report.outcome == RoundOutcome::NothingToDo;
            }
            quiet = if all_idle { quiet + 1 } else { 0 };
        }
        assert_eq!(counts(&store), expected(&words), "seed {seed}");
    }
}

#[test]
fn live_sockets_match_word_count() {
    let words = words(77);
    let store = setup();
    let mappers: Vec<Arc<Mutex<MapperRuntime>>> =
        (0..MAPPERS).map(|m| Arc::new(Mutex::new(mapper(&store, m, m as u128 + 1)))).collect();
    let servers: Vec<LiveServer> = mappers
        .iter()
        .map(|m| {
            let m = m.clone();
            LiveServer::bind("127.0.0.1:0", Arc::new(move |req| m.lock().unwrap().handle_get_rows(&req))).unwrap()
        })
        .collect();
    let mut reducers: Vec<ReducerRuntime> = (0..REDUCERS).map(|r| reducer(&store, r)).collect();

    for chunk in 0..ROWS / CHUNK {
        append_chunk(&store, &words, chunk);
    }
    let mut quiet = 0;
    for _ in 0..2_000 {
        for m in &mappers {
            let mut m = m.lock().unwrap();
            while matches!(m.ingestion_step().unwrap(), pullshuffle::mapper::StepOutcome::Appended { .. }) {}
            m.trim_input_rows();
        }
        let mut idle = true;
        for r in reducers.iter_mut() {
            let index = r.config().reducer_index;
            let report = r.step(|m, committed| {
                let id = mappers[m as usize].lock().unwrap().id();
                Some(live::call(servers[m as usize].local_addr(), &request(index, committed, id), Duration::from_secs(5)))
            });
            assert_ne!(report.outcome, RoundOutcome::SplitBrainSkip);
            idle &= report.outcome == RoundOutcome::NothingToDo;
        }
        quiet = if idle { quiet + 1 } else { 0 };
        if quiet == 2 {
            break;
        }
    }
    assert_eq!(quiet, 2, "live run did not settle");
    assert_eq!(counts(&store), expected(&words));
    for m in &mappers {
        m.lock().unwrap().trim_input_rows();
    }
    for m in 0..MAPPERS {
        let (trimmed, end) = store.ordered_bounds(&format!("input_{m}")).unwrap();
        assert_eq!(end, ROWS as u64);
        assert!(trimmed <= end);
    }
}

#[test]
fn unknown_mapper_id_is_refused() {
    let store = setup();
    append_chunk(&store, &words(1), 0);
    let mut m = mapper(&store, 0, 1);
    m.ingestion_step().unwrap();
    let err = m.handle_get_rows(&request(0, -1, Guid(2))).unwrap_err();
    let server = LiveServer::bind("127.0.0.1:0", Arc::new(move |_| Err(err.clone()))).unwrap();
    let reply = live::call(server.local_addr(), &request(0, -1, Guid(2)), Duration::from_secs(5));
    assert!(matches!(reply, Err(RpcError::Remote { .. })), "{reply:?}");
}
