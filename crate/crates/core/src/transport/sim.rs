//! Deterministic in-process network on a virtual clock.
//!
//! Every message is really encoded and decoded, so the simulated and the
//! socket transports exercise the same wire code. Delivery time is
//! `send + latency + jitter + bytes / bandwidth`, clamped to be no earlier
//! than the previous delivery on the same ordered link, which keeps every
//! link FIFO. Ties are broken by a global sequence number, so a seed fully
//! determines the trace.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::message::{decode, encode, Message, Tag};
use super::wire::WireError;
use super::Node;
use crate::data::WorkerId;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub latency_ns: u64,
    /// Uniform extra delay in `[0, jitter_ns]`.
    pub jitter_ns: u64,
    pub bytes_per_sec: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { latency_ns: 100_000, jitter_ns: 20_000, bytes_per_sec: 1.0e9, seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Throttle {
    pub worker: WorkerId,
    pub from_ns: u64,
    pub factor: f64,
}

/// Faults injected into a simulated run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultPlan {
    pub throttles: Vec<Throttle>,
    pub crashes: BTreeMap<WorkerId, u64>,
    /// Extra one-way latency per ordered link.
    pub link_delay_ns: BTreeMap<(Node, Node), u64>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn throttle(mut self, worker: WorkerId, from_ns: u64, factor: f64) -> Self {
        self.throttles.push(Throttle { worker, from_ns, factor });
        self
    }

    pub fn crash(mut self, worker: WorkerId, at_ns: u64) -> Self {
        self.crashes.insert(worker, at_ns);
        self
    }

    /// Compute slowdown of `worker` for work starting at `t`.
    pub fn slowdown(&self, worker: WorkerId, t: u64) -> f64 {
        self.throttles.iter().filter(|th| th.worker == worker && t >= th.from_ns).map(|th| th.factor).product()
    }

    pub fn is_crashed(&self, node: Node, t: u64) -> bool {
        match node {
            Node::Worker(w) => self.crashes.get(&w).is_some_and(|at| t >= *at),
            Node::Controller => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub sent_ns: u64,
    pub delivered_ns: u64,
    pub from: String,
    pub to: String,
    pub tag: u16,
    pub bytes: usize,
    pub dropped: bool,
}

#[derive(Debug)]
pub enum SimEvent<L> {
    Deliver { from: Node, to: Node, msg: Message },
    Local(L),
}

enum Queued<L> {
    Frame { from: Node, to: Node, frame: Vec<u8>, trace: usize },
    Local(L),
}

pub struct SimNetwork<L> {
    cfg: NetConfig,
    faults: FaultPlan,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Queued<L>>,
    link_last: HashMap<(Node, Node), u64>,
    trace: Vec<TraceEntry>,
}

impl<L> SimNetwork<L> {
    pub fn new(cfg: NetConfig, faults: FaultPlan) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        SimNetwork {
            cfg,
            faults,
            rng,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            link_last: HashMap::new(),
            trace: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn faults(&self) -> &FaultPlan {
        &self.faults
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceEntry> {
        self.trace
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    fn push(&mut self, at: u64, q: Queued<L>) {
        self.queue.insert((at, self.seq), q);
        self.seq += 1;
    }

    /// Queues `msg`; returns its scheduled delivery time.
    pub fn send(&mut self, from: Node, to: Node, msg: &Message) -> u64 {
        let frame = encode(msg);
        let jitter = if self.cfg.jitter_ns > 0 { self.rng.random_range(0..=self.cfg.jitter_ns) } else { 0 };
        let wire = (frame.len() as f64 / self.cfg.bytes_per_sec * 1e9) as u64;
        let extra = self.faults.link_delay_ns.get(&(from, to)).copied().unwrap_or(0);
        let mut at = self.now + self.cfg.latency_ns + jitter + wire + extra;
        let last = self.link_last.entry((from, to)).or_insert(0);
        at = at.max(*last);
        *last = at;
        let dropped = self.faults.is_crashed(from, self.now);
        self.trace.push(TraceEntry {
            sent_ns: self.now,
            delivered_ns: at,
            from: from.to_string(),
            to: to.to_string(),
            tag: msg.tag() as u16,
            bytes: frame.len(),
            dropped,
        });
        if !dropped {
            let trace = self.trace.len() - 1;
            self.push(at, Queued::Frame { from, to, frame, trace });
        }
        at
    }

    pub fn schedule(&mut self, at: u64, event: L) {
        self.push(at.max(self.now), Queued::Local(event));
    }

    /// Advances the clock to the globally earliest event. Frames to or
    /// from a crashed worker are dropped at delivery time.
    pub fn step(&mut self) -> Result<Option<(u64, SimEvent<L>)>, WireError> {
        while let Some(((at, _), q)) = self.queue.pop_first() {
            self.now = at;
            match q {
                Queued::Local(l) => return Ok(Some((at, SimEvent::Local(l)))),
                Queued::Frame { from, to, frame, trace } => {
                    if self.faults.is_crashed(to, at) || self.faults.is_crashed(from, at) {
                        self.trace[trace].dropped = true;
                        continue;
                    }
                    let msg = decode(&frame)?;
                    return Ok(Some((at, SimEvent::Deliver { from, to, msg })));
                }
            }
        }
        Ok(None)
    }

    /// Time of the next queued event.
    pub fn peek_time(&self) -> Option<u64> {
        self.queue.keys().next().map(|(t, _)| *t)
    }
}

/// Tags in the order the trace records them; handy in assertions.
pub fn tag_of(entry: &TraceEntry) -> Option<Tag> {
    Tag::from_u16(entry.tag).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::JobId;
    use crate::transport::DoneKind;

    fn done(n: u64) -> Message {
        Message::JobDone { epoch: 0, job: JobId(n), kind: DoneKind::Compute }
    }

    fn drain(net: &mut SimNetwork<()>) -> Vec<(u64, Message)> {
        let mut out = Vec::new();
        while let Some((t, ev)) = net.step().unwrap() {
            if let SimEvent::Deliver { msg, .. } = ev {
                out.push((t, msg));
            }
        }
        out
    }

    #[test]
    fn link_is_fifo() {
        let cfg = NetConfig { jitter_ns: 1_000_000, ..NetConfig::default() };
        let mut net: SimNetwork<()> = SimNetwork::new(cfg, FaultPlan::none());
        for i in 0..50 {
            net.send(Node::Worker(1), Node::Controller, &done(i));
        }
        let got: Vec<Message> = drain(&mut net).into_iter().map(|(_, m)| m).collect();
        assert_eq!(got, (0..50).map(done).collect::<Vec<_>>());
    }

    #[test]
    fn crash_drops_later_traffic() {
        let faults = FaultPlan::none().crash(2, 150_000);
        let mut net: SimNetwork<()> = SimNetwork::new(NetConfig { jitter_ns: 0, ..NetConfig::default() }, faults);
        net.send(Node::Controller, Node::Worker(2), &done(1));
        assert_eq!(drain(&mut net).len(), 1);
        net.schedule(200_000, ());
        net.step().unwrap();
        net.send(Node::Controller, Node::Worker(2), &done(2));
        net.send(Node::Worker(2), Node::Controller, &done(3));
        assert!(drain(&mut net).is_empty());
        let dropped: Vec<bool> = net.trace().iter().map(|t| t.dropped).collect();
        assert_eq!(dropped, [false, true, true]);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let mut net: SimNetwork<()> = SimNetwork::new(NetConfig { seed, ..NetConfig::default() }, FaultPlan::none());
            for i in 0..20 {
                net.send(Node::Worker((i % 3) as u32), Node::Controller, &done(i));
            }
            drain(&mut net);
            net.into_trace()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn throttle_applies_after_start() {
        let f = FaultPlan::none().throttle(2, 1_000, 5.0);
        assert_eq!(f.slowdown(2, 999), 1.0);
        assert_eq!(f.slowdown(2, 1_000), 5.0);
        assert_eq!(f.slowdown(1, 5_000), 1.0);
    }
}
