//! Deterministic discrete-event network simulator.
//!
//! Virtual time is u64 nanoseconds. Delivery of a frame sent at `t`
//! from A to B costs:
//!
//! ```text
//! depart  = max(t, A's egress becomes free)
//! service = per_byte * frame_size          (A's egress is busy)
//! extra   = base + jitter * N(0,1), never below zero
//! arrive  = depart + service + extra, clamped FIFO per (A, B) link
//! ```
//!
//! Serializing service time on the sender's egress is the contention
//! model: replies queue behind each other at a busy node. Runs with the
//! same seed and inputs replay byte for byte.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardstore_core::wire::encoded_len;
use shardstore_core::{Envelope, ErrorCode, Message};

use crate::client::ClientState;
use crate::config::LatencySettings;
use crate::endpoint::{Action, Command};
use crate::node::NodeState;

/// Per-sender delivery cost model, nanosecond units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    base_ns: u64,
    per_byte_ns: f64,
    jitter_ns: f64,
}

impl LatencyModel {
    pub fn new(base_ms: f64, per_byte_ms: f64, jitter_ms: f64) -> Self {
        LatencyModel {
            base_ns: (base_ms * 1e6) as u64,
            per_byte_ns: per_byte_ms * 1e6,
            jitter_ns: jitter_ms * 1e6,
        }
    }

    pub fn from_settings(s: &LatencySettings) -> Self {
        Self::new(s.base_ms, s.per_byte_ms, s.jitter_ms)
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    fn service_ns(&self, size: u64) -> u64 {
        (self.per_byte_ns * size as f64).round() as u64
    }

    /// Base plus jitter draw. The rng advances only when jitter is
    /// configured, so jitter-free runs are insensitive to draw order.
    fn extra_ns(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.jitter_ns <= 0.0 {
            return self.base_ns;
        }
        let z = gaussian(rng);
        let extra = self.base_ns as f64 + self.jitter_ns * z;
        extra.max(0.0) as u64
    }
}

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
}

#[derive(Debug)]
enum Incoming {
    Message { from: String, env: Envelope },
    Command(Command),
}

#[derive(Debug)]
struct Scheduled {
    at: u64,
    seq: u64,
    to: String,
    what: Incoming,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

pub enum Actor {
    Node(NodeState),
    Client(ClientState),
    #[cfg(test)]
    Probe(probe::ProbeState),
}

impl Actor {
    fn handle(&mut self, what: Incoming, now: u64, out: &mut Vec<Action>) {
        match (self, what) {
            (Actor::Node(n), Incoming::Message { from, env }) => n.on_message(&from, env, now, out),
            (Actor::Node(_), Incoming::Command(_)) => {}
            (Actor::Client(c), Incoming::Message { from, env }) => {
                c.on_message(&from, env, now, out)
            }
            (Actor::Client(c), Incoming::Command(cmd)) => c.on_command(cmd, now, out),
            #[cfg(test)]
            (Actor::Probe(p), Incoming::Message { from, env }) => p.on_message(&from, env, now, out),
            #[cfg(test)]
            (Actor::Probe(_), Incoming::Command(_)) => {}
        }
    }
}

/// Wire traffic tally for one message type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counter {
    pub count: u64,
    pub bytes: u64,
}

pub struct Sim {
    now_ns: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<Scheduled>>,
    actors: BTreeMap<String, Actor>,
    default_latency: LatencyModel,
    sender_latency: BTreeMap<String, LatencyModel>,
    sender_busy_ns: BTreeMap<String, u64>,
    link_last_ns: BTreeMap<(String, String), u64>,
    cancelled: BTreeSet<(String, u64)>,
    killed: BTreeSet<String>,
    rng: ChaCha8Rng,
    counters: BTreeMap<&'static str, Counter>,
}

impl Sim {
    pub fn new(seed: u64, default_latency: LatencyModel) -> Self {
        Sim {
            now_ns: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            actors: BTreeMap::new(),
            default_latency,
            sender_latency: BTreeMap::new(),
            sender_busy_ns: BTreeMap::new(),
            link_last_ns: BTreeMap::new(),
            cancelled: BTreeSet::new(),
            killed: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: BTreeMap::new(),
        }
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    pub fn add_node(&mut self, node: NodeState) {
        self.actors.insert(node.addr().to_string(), Actor::Node(node));
    }

    pub fn add_client(&mut self, client: ClientState) {
        self.actors.insert(client.addr().to_string(), Actor::Client(client));
    }

    #[cfg(test)]
    fn add_probe(&mut self, probe: probe::ProbeState) {
        self.actors.insert(probe.addr.clone(), Actor::Probe(probe));
    }

    pub fn node(&self, addr: &str) -> &NodeState {
        match self.actors.get(addr) {
            Some(Actor::Node(n)) => n,
            _ => panic!("no node at {addr}"),
        }
    }

    pub fn client(&self, addr: &str) -> &ClientState {
        match self.actors.get(addr) {
            Some(Actor::Client(c)) => c,
            _ => panic!("no client at {addr}"),
        }
    }

    pub fn client_mut(&mut self, addr: &str) -> &mut ClientState {
        match self.actors.get_mut(addr) {
            Some(Actor::Client(c)) => c,
            _ => panic!("no client at {addr}"),
        }
    }

    pub fn node_addrs(&self) -> Vec<String> {
        self.actors
            .iter()
            .filter(|(_, a)| matches!(a, Actor::Node(_)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Overrides the sender-side cost model for one endpoint.
    pub fn set_sender_latency(&mut self, addr: &str, model: LatencyModel) {
        self.sender_latency.insert(addr.to_string(), model);
    }

    /// A killed endpoint receives nothing; requests sent to it bounce
    /// back as unreachable errors.
    pub fn kill(&mut self, addr: &str) {
        self.killed.insert(addr.to_string());
    }

    pub fn counters(&self) -> &BTreeMap<&'static str, Counter> {
        &self.counters
    }

    pub fn total_wire_bytes(&self) -> u64 {
        self.counters.values().map(|c| c.bytes).sum()
    }

    /// Times earlier than the current clock clamp to now.
    pub fn schedule_command(&mut self, at_ns: u64, to: &str, cmd: Command) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            at: at_ns.max(self.now_ns),
            seq: self.seq,
            to: to.to_string(),
            what: Incoming::Command(cmd),
        }));
    }

    /// Runs until no events remain. Virtual, so independent of wall time.
    pub fn run_until_idle(&mut self) {
        while let Some(Reverse(ev)) = self.heap.pop() {
            debug_assert!(ev.at >= self.now_ns);
            self.now_ns = ev.at;
            if let Incoming::Message { ref env, .. } = ev.what {
                // A canceller's replies on that id are suppressed.
                if self.cancelled.contains(&(ev.to.clone(), env.request_id)) {
                    continue;
                }
            }
            self.deliver(ev.to, ev.what);
        }
    }

    /// Feeds one event to its actor, looping self-addressed sends back
    /// inline (no latency, no wire accounting) and scheduling the rest.
    fn deliver(&mut self, to: String, what: Incoming) {
        let mut queue = std::collections::VecDeque::new();
        queue.push_back((to, what));
        while let Some((addr, what)) = queue.pop_front() {
            if self.killed.contains(&addr) {
                if let Incoming::Message { from, env } = what {
                    self.bounce_unreachable(&addr, &from, env);
                }
                continue;
            }
            let Some(actor) = self.actors.get_mut(&addr) else { continue };
            let mut out = Vec::new();
            actor.handle(what, self.now_ns, &mut out);
            for Action::Send { to, env } in out {
                if to == addr {
                    queue.push_back((to.clone(), Incoming::Message { from: addr.clone(), env }));
                } else {
                    self.schedule_send(&addr, &to, env);
                }
            }
        }
    }

    /// Requests to a dead endpoint come back as errors after the usual
    /// network delay, so callers see a timeout-like failure.
    fn bounce_unreachable(&mut self, dead: &str, sender: &str, env: Envelope) {
        if matches!(env.message, Message::ErrorReply { .. } | Message::Cancel { .. })
            || self.killed.contains(sender)
        {
            return;
        }
        let reply = Envelope {
            request_id: env.request_id,
            message: Message::ErrorReply {
                code: ErrorCode::Unreachable,
                detail: dead.to_string(),
            },
        };
        let model = self.sender_latency.get(dead).copied().unwrap_or(self.default_latency);
        let at = self.now_ns + model.base_ns.max(1);
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            to: sender.to_string(),
            what: Incoming::Message { from: dead.to_string(), env: reply },
        }));
    }

    fn schedule_send(&mut self, from: &str, to: &str, env: Envelope) {
        if let Message::Cancel { target } = env.message {
            // From here on, replies to the canceller under that id are
            // dropped; the cancel still travels to clean up remote state.
            self.cancelled.insert((from.to_string(), target));
        }
        let size = encoded_len(&env).unwrap_or(0) as u64;
        let c = self.counters.entry(env.message.type_name()).or_default();
        c.count += 1;
        c.bytes += size;

        if self.killed.contains(to) {
            self.bounce_unreachable(to, from, env);
            return;
        }

        let model = self.sender_latency.get(from).copied().unwrap_or(self.default_latency);
        let busy = self.sender_busy_ns.get(from).copied().unwrap_or(0);
        let depart = busy.max(self.now_ns);
        let service = model.service_ns(size);
        self.sender_busy_ns.insert(from.to_string(), depart + service);
        let extra = model.extra_ns(&mut self.rng);
        let mut arrive = depart + service + extra;

        // FIFO per directed link.
        let link = (from.to_string(), to.to_string());
        if let Some(&last) = self.link_last_ns.get(&link) {
            arrive = arrive.max(last + 1);
        }
        self.link_last_ns.insert(link, arrive);

        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            at: arrive,
            seq: self.seq,
            to: to.to_string(),
            what: Incoming::Message { from: from.to_string(), env },
        }));
    }
}
