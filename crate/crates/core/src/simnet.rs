//! Deterministic discrete-event transport.
//!
//! One seeded generator drives every loss and latency draw, and events with
//! equal timestamps run in scheduling order, so a run is a pure function of
//! the seed and the sequence of calls made against the simulator.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Duration, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("no link from {0} to {1}")]
    NoLink(String, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latency {
    Fixed { us: u64 },
    Uniform { min_us: u64, max_us: u64 },
}

impl Latency {
    pub fn fixed(d: Duration) -> Self {
        Latency::Fixed { us: d.as_micros() }
    }

    pub fn uniform(min: Duration, max: Duration) -> Self {
        Latency::Uniform {
            min_us: min.as_micros().min(max.as_micros()),
            max_us: max.as_micros().max(min.as_micros()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Duration {
        match *self {
            Latency::Fixed { us } => Duration(us),
            Latency::Uniform { min_us, max_us } if min_us == max_us => Duration(min_us),
            Latency::Uniform { min_us, max_us } => Duration(rng.random_range(min_us..=max_us)),
        }
    }
}

/// Per-direction link behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub latency: Latency,
    pub loss_prob: f64,
    pub connected: bool,
    /// Deliveries preserve send order even when latency samples would reorder them.
    pub ordered: bool,
    /// Multihop paths are modelled as `hops` times the sampled latency.
    pub hops: u32,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            latency: Latency::uniform(Duration::from_millis(10), Duration::from_millis(20)),
            loss_prob: 0.0,
            connected: true,
            ordered: true,
            hops: 1,
        }
    }
}

impl LinkModel {
    /// Zero-latency lossless link between processes on one host.
    pub fn local() -> Self {
        LinkModel {
            latency: Latency::Fixed { us: 0 },
            ..LinkModel::default()
        }
    }

    pub fn with_latency(mut self, latency: Latency) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_prob = p.clamp(0.0, 1.0);
        self
    }

    pub fn unordered(mut self) -> Self {
        self.ordered = false;
        self
    }
}

#[derive(Clone, Debug)]
struct LinkState {
    model: LinkModel,
    last_delivery: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    Deliver {
        src: NodeId,
        dst: NodeId,
        bytes: Vec<u8>,
        topic: Option<String>,
    },
    Timer {
        node: NodeId,
        token: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    Lost,
    LinkDown,
    Scripted,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::Send => "send",
            TraceKind::Deliver => "deliver",
            TraceKind::Lost => "lost",
            TraceKind::LinkDown => "link_down",
            TraceKind::Scripted => "scripted_drop",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_us: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: TraceKind,
    pub byte_len: usize,
    pub topic: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetCounters {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub link_down: u64,
    pub scripted: u64,
}

type DropPredicate = Box<dyn FnMut(NodeId, NodeId, &[u8]) -> bool + Send>;

struct DropRule {
    matches: DropPredicate,
    remaining: u32,
}

pub struct Sim {
    now: SimTime,
    seed: u64,
    rng: ChaCha8Rng,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), EventKind>,
    names: Vec<String>,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    trace: Vec<TraceRecord>,
    tracing: bool,
    counters: NetCounters,
    drop_rules: Vec<DropRule>,
}

impl fmt::Debug for Sim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sim")
            .field("now", &self.now)
            .field("seed", &self.seed)
            .field("pending", &self.queue.len())
            .field("nodes", &self.names)
            .finish()
    }
}

impl Sim {
    pub fn new(seed: u64) -> Self {
        Sim {
            now: SimTime::ZERO,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq: 0,
            queue: BTreeMap::new(),
            names: Vec::new(),
            links: BTreeMap::new(),
            trace: Vec::new(),
            tracing: true,
            counters: NetCounters::default(),
            drop_rules: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn add_node(&mut self, name: impl Into<String>) -> NodeId {
        self.names.push(name.into());
        NodeId(self.names.len() as u32 - 1)
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    /// Installs the same model in both directions.
    pub fn connect(&mut self, a: NodeId, b: NodeId, model: LinkModel) {
        self.set_link(a, b, model);
        self.set_link(b, a, model);
    }

    pub fn set_link(&mut self, src: NodeId, dst: NodeId, model: LinkModel) {
        let last = self.links.get(&(src, dst)).map(|l| l.last_delivery).unwrap_or_default();
        self.links.insert((src, dst), LinkState { model, last_delivery: last });
    }

    pub fn link(&self, src: NodeId, dst: NodeId) -> Option<&LinkModel> {
        self.links.get(&(src, dst)).map(|l| &l.model)
    }

    /// Toggles both directions of an existing link.
    pub fn set_connected(&mut self, a: NodeId, b: NodeId, connected: bool) {
        for key in [(a, b), (b, a)] {
            if let Some(l) = self.links.get_mut(&key) {
                l.model.connected = connected;
            }
        }
    }

    /// Toggles every link touching `node`.
    pub fn set_node_connected(&mut self, node: NodeId, connected: bool) {
        for ((s, d), l) in self.links.iter_mut() {
            if *s == node || *d == node {
                l.model.connected = connected;
            }
        }
    }

    /// Drops the next `count` packets for which `matches` returns true.
    pub fn drop_matching(
        &mut self,
        count: u32,
        matches: impl FnMut(NodeId, NodeId, &[u8]) -> bool + Send + 'static,
    ) {
        self.drop_rules.push(DropRule {
            matches: Box::new(matches),
            remaining: count,
        });
    }

    pub fn counters(&self) -> NetCounters {
        self.counters
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Deliveries still scheduled whose topic label equals `topic`.
    pub fn in_flight_for(&self, topic: &str) -> u64 {
        self.queue
            .values()
            .filter(|k| matches!(k, EventKind::Deliver { topic: Some(t), .. } if t == topic))
            .count() as u64
    }

    fn record(&mut self, src: NodeId, dst: NodeId, kind: TraceKind, len: usize, topic: Option<&str>) {
        if self.tracing {
            self.trace.push(TraceRecord {
                time_us: self.now.as_micros(),
                src,
                dst,
                kind,
                byte_len: len,
                topic: topic.map(str::to_string),
            });
        }
    }

    fn push(&mut self, at: SimTime, kind: EventKind) -> u64 {
        debug_assert!(at >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.queue.insert((at, self.seq), kind);
        self.seq
    }

    /// Transmits `bytes` over the `src -> dst` link. Returns the delivery time, or `None` when dropped.
    pub fn send(
        &mut self,
        src: NodeId,
        dst: NodeId,
        bytes: Vec<u8>,
        topic: Option<&str>,
    ) -> Result<Option<SimTime>, SimError> {
        let Some(state) = self.links.get(&(src, dst)) else {
            return Err(SimError::NoLink(self.name(src).to_string(), self.name(dst).to_string()));
        };
        let model = state.model;
        let last = state.last_delivery;
        self.counters.sent += 1;
        self.record(src, dst, TraceKind::Send, bytes.len(), topic);

        if !model.connected {
            self.counters.link_down += 1;
            self.record(src, dst, TraceKind::LinkDown, bytes.len(), topic);
            return Ok(None);
        }
        let mut scripted = false;
        for rule in self.drop_rules.iter_mut().filter(|r| r.remaining > 0) {
            if (rule.matches)(src, dst, &bytes) {
                rule.remaining -= 1;
                scripted = true;
                break;
            }
        }
        self.drop_rules.retain(|r| r.remaining > 0);
        if scripted {
            self.counters.scripted += 1;
            self.record(src, dst, TraceKind::Scripted, bytes.len(), topic);
            return Ok(None);
        }
        let lost = if model.loss_prob <= 0.0 {
            false
        } else if model.loss_prob >= 1.0 {
            true
        } else {
            self.rng.random_bool(model.loss_prob)
        };
        if lost {
            self.counters.lost += 1;
            self.record(src, dst, TraceKind::Lost, bytes.len(), topic);
            return Ok(None);
        }
        let sample = model.latency.sample(&mut self.rng).times(model.hops.max(1) as u64);
        let mut at = self.now + sample;
        if model.ordered {
            at = at.max(last);
        }
        if let Some(l) = self.links.get_mut(&(src, dst)) {
            l.last_delivery = at;
        }
        self.push(
            at,
            EventKind::Deliver {
                src,
                dst,
                bytes,
                topic: topic.map(str::to_string),
            },
        );
        Ok(Some(at))
    }

    pub fn schedule_timer(&mut self, at: SimTime, node: NodeId, token: u64) {
        let at = at.max(self.now);
        self.push(at, EventKind::Timer { node, token });
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.first_key_value().map(|((t, _), _)| *t)
    }

    /// Pops the next event at or before `t_end`, advancing the clock to it.
    pub fn next_event(&mut self, t_end: SimTime) -> Option<SimEvent> {
        let (&(time, seq), _) = self.queue.first_key_value()?;
        if time > t_end {
            return None;
        }
        let kind = self.queue.remove(&(time, seq)).expect("key just observed");
        self.now = time;
        if let EventKind::Deliver { src, dst, bytes, topic } = &kind {
            self.counters.delivered += 1;
            let (src, dst, len, topic) = (*src, *dst, bytes.len(), topic.clone());
            self.record(src, dst, TraceKind::Deliver, len, topic.as_deref());
        }
        Some(SimEvent { time, seq, kind })
    }

    /// Advances the clock to `t` without processing anything. Only moves forward.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Runs every event up to `t_end` through `handler` and returns the trace records it produced.
    pub fn run_until(
        &mut self,
        t_end: SimTime,
        mut handler: impl FnMut(&mut Sim, SimEvent),
    ) -> &[TraceRecord] {
        let start = self.trace.len();
        while let Some(ev) = self.next_event(t_end) {
            handler(self, ev);
        }
        self.advance_to(t_end);
        &self.trace[start..]
    }

    /// Line-delimited trace: `time_us src dst kind byte_len topic`, tab separated.
    pub fn render_trace(&self) -> String {
        let mut out = String::from("time_us\tsrc\tdst\tevent_kind\tbyte_len\ttopic\n");
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.time_us,
                self.name(r.src),
                self.name(r.dst),
                r.kind,
                r.byte_len,
                r.topic.as_deref().unwrap_or("-")
            );
        }
        out
    }
}
