use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::{Clock, Guid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WorkerKind {
    Mapper,
    Reducer,
}

impl fmt::Display for WorkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkerKind::Mapper => "mapper",
            WorkerKind::Reducer => "reducer",
        })
    }
}

/// Opaque network handle. The simulator hands out one per worker instance;
/// the live transport maps it to a socket address through the attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub u64);

/// One registered worker instance. Two live instances may share
/// `(kind, index)` while a replacement and its predecessor overlap.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub kind: WorkerKind,
    pub index: u32,
    pub guid: Guid,
    pub address: Address,
}

pub type Attributes = BTreeMap<String, String>;

#[derive(Debug, Clone)]
struct Membership {
    endpoint: Endpoint,
    attributes: Attributes,
    visible_from: u64,
    removed_from: Option<u64>,
}

/// Membership directory whose changes become visible only after a
/// propagation delay, so listings can be stale in both directions.
#[derive(Clone)]
pub struct Discovery {
    delay_ms: u64,
    clock: Arc<dyn Clock>,
    groups: Arc<Mutex<BTreeMap<String, Vec<Membership>>>>,
}

impl fmt::Debug for Discovery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Discovery").field("delay_ms", &self.delay_ms).finish_non_exhaustive()
    }
}

impl Discovery {
    pub fn new(delay_ms: u64, clock: Arc<dyn Clock>) -> Self {
        Discovery { delay_ms, clock, groups: Arc::default() }
    }

    pub fn delay_ms(&self) -> u64 {
        self.delay_ms
    }

    pub fn register(&self, group: &str, endpoint: Endpoint, attributes: Attributes) {
        let now = self.clock.now_ms();
        let mut groups = self.groups.lock().expect("discovery lock poisoned");
        groups.entry(group.to_string()).or_default().push(Membership {
            endpoint,
            attributes,
            visible_from: now + self.delay_ms,
            removed_from: None,
        });
    }

    /// Schedules removal of the instance with `guid`; it keeps being listed
    /// until the propagation delay passes.
    pub fn deregister(&self, group: &str, guid: Guid) {
        let now = self.clock.now_ms();
        let mut groups = self.groups.lock().expect("discovery lock poisoned");
        if let Some(members) = groups.get_mut(group) {
            for m in members.iter_mut().filter(|m| m.endpoint.guid == guid && m.removed_from.is_none()) {
                m.removed_from = Some(now + self.delay_ms);
            }
            members.retain(|m| m.removed_from.map_or(true, |t| t + self.delay_ms > now));
        }
    }

    /// Current, possibly stale, view of `group`, ordered by
    /// `(kind, index, registration order)`.
    pub fn list(&self, group: &str) -> Vec<(Endpoint, Attributes)> {
        let now = self.clock.now_ms();
        let groups = self.groups.lock().expect("discovery lock poisoned");
        let Some(members) = groups.get(group) else {
            return Vec::new();
        };
        let mut out: Vec<(usize, &Membership)> = members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.visible_from <= now && m.removed_from.map_or(true, |t| now < t))
            .collect();
        out.sort_by_key(|(order, m)| (m.endpoint.kind, m.endpoint.index, *order));
        out.into_iter().map(|(_, m)| (m.endpoint.clone(), m.attributes.clone())).collect()
    }
}
