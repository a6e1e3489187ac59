use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::discovery::Address;
use super::messages::{Frame, GetRowsError, GetRowsRequest, GetRowsResponse, RpcError};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Probability that either leg of a call is lost.
    pub drop_probability: f64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    /// Caller-side deadline.
    pub timeout_ms: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { drop_probability: 0.0, latency_min_ms: 1, latency_max_ms: 5, timeout_ms: 1000 }
    }
}

/// Fate of one call, decided up front so the event loop can schedule it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    /// Request arrives after `there` ms; response arrives `back` ms later.
    Deliver { there: u64, back: u64 },
    /// The request is lost; the caller times out.
    RequestLost,
    /// The handler runs after `there` ms but the response is lost.
    ResponseLost { there: u64 },
    /// Target is down or cut off; fails immediately.
    Unreachable,
}

/// Seeded in-process network with loss, latency, partitions and dead hosts.
///
/// Every random decision comes from one ChaCha stream, so a fixed seed and
/// call sequence reproduce the same fates.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    config: NetConfig,
    rng: ChaCha8Rng,
    partitioned: BTreeSet<(Address, Address)>,
    down: BTreeSet<Address>,
    isolated: BTreeSet<Address>,
    decisions: u64,
}

impl SimNetwork {
    pub fn new(config: NetConfig, seed: u64) -> Self {
        SimNetwork {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            partitioned: BTreeSet::new(),
            down: BTreeSet::new(),
            isolated: BTreeSet::new(),
            decisions: 0,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn set_drop_probability(&mut self, p: f64) {
        self.config.drop_probability = p;
    }

    fn pair(a: Address, b: Address) -> (Address, Address) {
        if a <= b { (a, b) } else { (b, a) }
    }

    pub fn partition(&mut self, a: Address, b: Address) {
        self.partitioned.insert(Self::pair(a, b));
    }

    pub fn heal(&mut self, a: Address, b: Address) {
        self.partitioned.remove(&Self::pair(a, b));
    }

    pub fn is_partitioned(&self, a: Address, b: Address) -> bool {
        self.partitioned.contains(&Self::pair(a, b)) || self.isolated.contains(&a) || self.isolated.contains(&b)
    }

    /// Cuts `a` off from everyone until [`SimNetwork::rejoin`].
    pub fn isolate(&mut self, a: Address) {
        self.isolated.insert(a);
    }

    pub fn rejoin(&mut self, a: Address) {
        self.isolated.remove(&a);
    }

    pub fn set_down(&mut self, a: Address, down: bool) {
        if down {
            self.down.insert(a);
        } else {
            self.down.remove(&a);
        }
    }

    pub fn is_down(&self, a: Address) -> bool {
        self.down.contains(&a)
    }

    /// Number of fates decided so far.
    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    fn latency(&mut self) -> u64 {
        let (lo, hi) = (self.config.latency_min_ms, self.config.latency_max_ms.max(self.config.latency_min_ms));
        self.rng.gen_range(lo..=hi)
    }

    fn lost(&mut self) -> bool {
        self.config.drop_probability > 0.0 && self.rng.gen_bool(self.config.drop_probability.min(1.0))
    }

    pub fn plan(&mut self, from: Address, to: Address) -> Delivery {
        self.decisions += 1;
        if self.is_down(to) || self.is_partitioned(from, to) {
            return Delivery::Unreachable;
        }
        if self.lost() {
            return Delivery::RequestLost;
        }
        let there = self.latency();
        if self.lost() {
            return Delivery::ResponseLost { there };
        }
        let back = self.latency();
        if there + back > self.config.timeout_ms {
            return Delivery::ResponseLost { there };
        }
        Delivery::Deliver { there, back }
    }

    /// Performs a whole call synchronously: the request and the reply go
    /// through the wire encoding and `handler` runs only if the request
    /// arrives. Returns the outcome and the virtual time it took.
    pub fn call<F>(&mut self, from: Address, to: Address, request: &GetRowsRequest, handler: F) -> (Result<GetRowsResponse, RpcError>, u64)
    where
        F: FnOnce(GetRowsRequest) -> Result<GetRowsResponse, GetRowsError>,
    {
        let timeout = self.config.timeout_ms;
        match self.plan(from, to) {
            Delivery::Unreachable => (Err(RpcError::Unreachable), 0),
            Delivery::RequestLost => (Err(RpcError::Timeout), timeout),
            Delivery::ResponseLost { .. } => {
                if let Ok(Frame::Request(req)) = Frame::decode(&Frame::Request(request.clone()).encode()) {
                    let _ = handler(req);
                }
                (Err(RpcError::Timeout), timeout)
            }
            Delivery::Deliver { there, back } => {
                let req = match Frame::decode(&Frame::Request(request.clone()).encode()) {
                    Ok(Frame::Request(req)) => req,
                    Ok(_) => return (Err(RpcError::Malformed("request decoded as another kind".into())), there),
                    Err(e) => return (Err(e), there),
                };
                let reply = match handler(req) {
                    Ok(rsp) => Frame::Response(rsp),
                    Err(e) => Frame::Error { code: e.code(), message: e.to_string() },
                };
                (decode_reply(&reply.encode()), there + back)
            }
        }
    }
}

/// Turns a reply frame into the caller-visible result.
pub fn decode_reply(bytes: &[u8]) -> Result<GetRowsResponse, RpcError> {
    match Frame::decode(bytes)? {
        Frame::Response(rsp) => Ok(rsp),
        Frame::Error { code, message } => Err(RpcError::Remote { code, message }),
        Frame::Request(_) => Err(RpcError::Malformed("request frame in reply position".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Guid;

    fn req() -> GetRowsRequest {
        GetRowsRequest { count: 4, reducer_index: 0, committed_row_index: -1, mapper_id: Guid(7) }
    }

    fn echo(r: GetRowsRequest) -> Result<GetRowsResponse, GetRowsError> {
        Ok(GetRowsResponse { row_count: r.count, last_shuffle_row_index: Some(3), attachment: vec![1, 2, 3] })
    }

    #[test]
    fn fault_free_call_returns_handler_output() {
        let mut net = SimNetwork::new(NetConfig::default(), 1);
        let (res, elapsed) = net.call(Address(1), Address(2), &req(), echo);
        assert_eq!(res.unwrap(), echo(req()).unwrap());
        assert!((2..=10).contains(&elapsed));
    }

    #[test]
    fn down_or_partitioned_target_is_unreachable() {
        let mut net = SimNetwork::new(NetConfig::default(), 1);
        net.set_down(Address(2), true);
        assert_eq!(net.call(Address(1), Address(2), &req(), echo).0, Err(RpcError::Unreachable));
        net.set_down(Address(2), false);
        net.partition(Address(2), Address(1));
        assert_eq!(net.call(Address(1), Address(2), &req(), echo).0, Err(RpcError::Unreachable));
        net.heal(Address(1), Address(2));
        assert!(net.call(Address(1), Address(2), &req(), echo).0.is_ok());
        net.isolate(Address(2));
        assert_eq!(net.call(Address(3), Address(2), &req(), echo).0, Err(RpcError::Unreachable));
        net.rejoin(Address(2));
        assert!(net.call(Address(3), Address(2), &req(), echo).0.is_ok());
    }

    #[test]
    fn remote_errors_travel_as_error_frames() {
        let mut net = SimNetwork::new(NetConfig::default(), 1);
        let (res, _) = net.call(Address(1), Address(2), &req(), |_| {
            Err(GetRowsError::StaleMapperId { requested: Guid(7), actual: Guid(8) })
        });
        assert!(matches!(res, Err(RpcError::Remote { code: 1, .. })));
    }

    fn attempts_until_success(seed: u64) -> Vec<u32> {
        let mut net = SimNetwork::new(NetConfig { drop_probability: 0.3, ..NetConfig::default() }, seed);
        (0..200)
            .map(|_| {
                let mut attempts = 1;
                while net.call(Address(1), Address(2), &req(), echo).0.is_err() {
                    attempts += 1;
                }
                attempts
            })
            .collect()
    }

    #[test]
    fn lossy_retries_replay_exactly() {
        let a = attempts_until_success(42);
        assert_eq!(a, attempts_until_success(42));
        assert!(a.iter().any(|&n| n > 1));
        // each attempt succeeds with probability 0.7 * 0.7
        let mean = a.iter().sum::<u32>() as f64 / a.len() as f64;
        assert!((1.6..2.6).contains(&mean), "mean attempts {mean}");
    }
}
