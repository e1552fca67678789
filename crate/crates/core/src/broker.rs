//! MQTT-SN broker with sequential-unicast fan-out and a finite radio buffer.
//!
//! Every packet the broker sends goes through one egress buffer. A broadcast
//! on a topic with `k` subscribers enqueues `k` copies; copy `i` (0-based,
//! in subscription order) becomes eligible `i * dispatch_gap` after the
//! PUBLISH arrived. The radio then releases eligible packets no faster than
//! one per `service_interval`. Enqueueing into a full buffer drops the
//! packet (tail drop).

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::mqttsn::{Flags, Packet, Publish, QoS, ReturnCode};
use crate::time::{Duration, SimTime};

pub type ClientId = String;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerConfig {
    /// Stagger between consecutive copies of one broadcast.
    pub dispatch_gap: Duration,
    /// Minimum spacing between two packets leaving the radio.
    pub service_interval: Duration,
    /// Egress buffer capacity in packets.
    pub buffer_capacity: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            dispatch_gap: Duration::from_millis(8),
            service_interval: Duration::from_micros(800),
            buffer_capacity: 1750,
        }
    }
}

/// A packet leaving the broker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Emission {
    pub dest: ClientId,
    pub packet: Packet,
    pub topic: Option<String>,
}

/// A packet accepted into the egress buffer by [`Broker::handle`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scheduled {
    pub dest: ClientId,
    pub packet: Packet,
    pub release_at: SimTime,
}

#[derive(Clone, Debug)]
struct Entry {
    dest: ClientId,
    packet: Packet,
    topic: Option<u16>,
}

/// Bounded egress queue, ordered by eligibility time then insertion order.
#[derive(Clone, Debug)]
pub struct EgressBuffer {
    capacity: usize,
    service_interval: Duration,
    entries: BTreeMap<(SimTime, u64), Entry>,
    seq: u64,
    last_release: Option<SimTime>,
    dropped: u64,
    released: u64,
}

impl EgressBuffer {
    pub fn new(capacity: usize, service_interval: Duration) -> Self {
        EgressBuffer {
            capacity,
            service_interval,
            entries: BTreeMap::new(),
            seq: 0,
            last_release: None,
            dropped: 0,
            released: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn released(&self) -> u64 {
        self.released
    }

    fn push(&mut self, eligible_at: SimTime, entry: Entry) -> bool {
        if self.entries.len() >= self.capacity {
            self.dropped += 1;
            return false;
        }
        self.seq += 1;
        self.entries.insert((eligible_at, self.seq), entry);
        true
    }

    /// When the head packet may leave, given the radio's spacing constraint.
    pub fn next_release(&self) -> Option<SimTime> {
        let (&(eligible, _), _) = self.entries.first_key_value()?;
        Some(match self.last_release {
            Some(last) => eligible.max(last + self.service_interval),
            None => eligible,
        })
    }

    /// Releases at most one packet if it is due at `now`.
    fn pop_due(&mut self, now: SimTime) -> Option<Entry> {
        if self.next_release()? > now {
            return None;
        }
        let (_, entry) = self.entries.pop_first()?;
        self.last_release = Some(now);
        self.released += 1;
        Some(entry)
    }

    fn count_topic(&self, topic_id: u16) -> u64 {
        self.entries.values().filter(|e| e.topic == Some(topic_id)).count() as u64
    }
}

/// Per-topic fan-out accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicStats {
    pub publishes: u64,
    /// Sum over publishes of the subscriber count at arrival.
    pub copies_expected: u64,
    pub copies_enqueued: u64,
    pub copies_dropped: u64,
    pub copies_sent: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerCounters {
    pub received: u64,
    pub sent: u64,
    pub buffer_dropped: u64,
    pub unknown_session: u64,
    pub unknown_topic: u64,
    pub max_occupancy: usize,
    /// Publish count on the topic whose copy was the first to be tail-dropped.
    pub first_drop: Option<FirstDrop>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstDrop {
    pub at: SimTime,
    pub topic_id: u16,
    pub topic_publishes: u64,
}

#[derive(Clone, Debug)]
struct Topic {
    name: String,
    subscribers: Vec<ClientId>,
    stats: TopicStats,
}

#[derive(Clone, Debug, Default)]
struct SessionRecord {
    subscriptions: BTreeSet<u16>,
}

#[derive(Clone, Debug)]
pub struct Broker {
    config: BrokerConfig,
    topics_by_name: BTreeMap<String, u16>,
    topics: BTreeMap<u16, Topic>,
    sessions: IndexMap<ClientId, SessionRecord>,
    next_topic_id: u16,
    egress: EgressBuffer,
    counters: BrokerCounters,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Broker {
            config,
            topics_by_name: BTreeMap::new(),
            topics: BTreeMap::new(),
            sessions: IndexMap::new(),
            next_topic_id: 1,
            egress: EgressBuffer::new(config.buffer_capacity, config.service_interval),
            counters: BrokerCounters::default(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn counters(&self) -> BrokerCounters {
        let mut c = self.counters;
        c.buffer_dropped = self.egress.dropped();
        c
    }

    pub fn egress(&self) -> &EgressBuffer {
        &self.egress
    }

    pub fn topic_id(&self, name: &str) -> Option<u16> {
        self.topics_by_name.get(name).copied()
    }

    pub fn subscribers(&self, name: &str) -> Vec<ClientId> {
        self.topic_id(name)
            .and_then(|id| self.topics.get(&id))
            .map(|t| t.subscribers.clone())
            .unwrap_or_default()
    }

    pub fn topic_stats(&self, name: &str) -> Option<TopicStats> {
        self.topic_id(name).and_then(|id| self.topics.get(&id)).map(|t| t.stats)
    }

    /// Copies for `name` still waiting in the egress buffer.
    pub fn buffered_for(&self, name: &str) -> u64 {
        self.topic_id(name).map(|id| self.egress.count_topic(id)).unwrap_or(0)
    }

    pub fn has_session(&self, client: &str) -> bool {
        self.sessions.contains_key(client)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Drops all sessions and topics, as after a power cycle. Counters persist.
    pub fn restart(&mut self) {
        self.topics_by_name.clear();
        self.topics.clear();
        self.sessions.clear();
        self.next_topic_id = 1;
        self.egress = EgressBuffer::new(self.config.buffer_capacity, self.config.service_interval);
    }

    fn topic_for(&mut self, name: &str) -> u16 {
        if let Some(id) = self.topics_by_name.get(name) {
            return *id;
        }
        let id = self.next_topic_id;
        self.next_topic_id = self.next_topic_id.wrapping_add(1).max(1);
        self.topics_by_name.insert(name.to_string(), id);
        self.topics.insert(
            id,
            Topic {
                name: name.to_string(),
                subscribers: Vec::new(),
                stats: TopicStats::default(),
            },
        );
        id
    }

    fn enqueue(
        &mut self,
        out: &mut Vec<Scheduled>,
        release_at: SimTime,
        dest: &str,
        packet: Packet,
        topic: Option<u16>,
    ) -> bool {
        let entry = Entry {
            dest: dest.to_string(),
            packet: packet.clone(),
            topic,
        };
        let accepted = self.egress.push(release_at, entry);
        if accepted {
            self.counters.max_occupancy = self.counters.max_occupancy.max(self.egress.len());
            out.push(Scheduled {
                dest: dest.to_string(),
                packet,
                release_at,
            });
        }
        accepted
    }

    fn reply(&mut self, out: &mut Vec<Scheduled>, now: SimTime, dest: &str, packet: Packet) {
        self.enqueue(out, now, dest, packet, None);
    }

    /// Processes one inbound packet and returns what it added to the egress buffer.
    pub fn handle(&mut self, now: SimTime, source: &str, packet: Packet) -> Vec<Scheduled> {
        self.counters.received += 1;
        let mut out = Vec::new();
        if !matches!(packet, Packet::Connect { .. }) && !self.sessions.contains_key(source) {
            self.counters.unknown_session += 1;
            self.reply(&mut out, now, source, Packet::Disconnect);
            return out;
        }
        match packet {
            Packet::Connect { flags, .. } => {
                let clean = flags.0 & Flags::CLEAN_SESSION != 0;
                if clean {
                    self.drop_subscriptions(source);
                }
                self.sessions.entry(source.to_string()).or_default();
                self.reply(&mut out, now, source, Packet::Connack { code: ReturnCode::Accepted });
            }
            Packet::Register { msg_id, topic_name, .. } => {
                let topic_id = self.topic_for(&topic_name);
                self.reply(
                    &mut out,
                    now,
                    source,
                    Packet::Regack { topic_id, msg_id, code: ReturnCode::Accepted },
                );
            }
            Packet::Subscribe { msg_id, topic_name, flags } => {
                let topic_id = self.topic_for(&topic_name);
                let topic = self.topics.get_mut(&topic_id).expect("topic just created");
                if !topic.subscribers.iter().any(|s| s == source) {
                    topic.subscribers.push(source.to_string());
                }
                if let Some(s) = self.sessions.get_mut(source) {
                    s.subscriptions.insert(topic_id);
                }
                self.reply(
                    &mut out,
                    now,
                    source,
                    Packet::Suback {
                        flags: Flags(flags.0 & 0x60),
                        topic_id,
                        msg_id,
                        code: ReturnCode::Accepted,
                    },
                );
            }
            Packet::Unsubscribe { msg_id, topic_name, .. } => {
                if let Some(id) = self.topics_by_name.get(&topic_name).copied() {
                    if let Some(t) = self.topics.get_mut(&id) {
                        t.subscribers.retain(|s| s != source);
                    }
                    if let Some(s) = self.sessions.get_mut(source) {
                        s.subscriptions.remove(&id);
                    }
                }
                self.reply(&mut out, now, source, Packet::Unsuback { msg_id });
            }
            Packet::Publish(p) => self.fan_out(&mut out, now, source, p),
            Packet::Disconnect => {
                self.drop_subscriptions(source);
                self.sessions.shift_remove(source);
            }
            // Client-side acknowledgements and broker-bound responses need no action.
            Packet::Puback { .. }
            | Packet::Regack { .. }
            | Packet::Connack { .. }
            | Packet::Suback { .. }
            | Packet::Unsuback { .. } => {}
        }
        out
    }

    fn fan_out(&mut self, out: &mut Vec<Scheduled>, now: SimTime, source: &str, p: Publish) {
        let qos = p.flags.qos();
        let Some(topic) = self.topics.get_mut(&p.topic_id) else {
            self.counters.unknown_topic += 1;
            if qos == Some(QoS::AtLeastOnce) {
                self.reply(
                    out,
                    now,
                    source,
                    Packet::Puback {
                        topic_id: p.topic_id,
                        msg_id: p.msg_id,
                        code: ReturnCode::RejectedInvalidTopicId,
                    },
                );
            }
            return;
        };
        topic.stats.publishes += 1;
        topic.stats.copies_expected += topic.subscribers.len() as u64;
        let publishes = topic.stats.publishes;
        let subscribers = topic.subscribers.clone();
        let gap = self.config.dispatch_gap;
        let mut enqueued = 0u64;
        let mut dropped = 0u64;
        for (i, dest) in subscribers.iter().enumerate() {
            let copy = Packet::Publish(Publish {
                flags: Flags::with_qos(QoS::AtMostOnce),
                topic_id: p.topic_id,
                msg_id: 0,
                data: p.data.clone(),
            });
            if self.enqueue(out, now + gap.times(i as u64), dest, copy, Some(p.topic_id)) {
                enqueued += 1;
            } else {
                dropped += 1;
                if self.counters.first_drop.is_none() {
                    self.counters.first_drop = Some(FirstDrop {
                        at: now,
                        topic_id: p.topic_id,
                        topic_publishes: publishes,
                    });
                }
            }
        }
        let topic = self.topics.get_mut(&p.topic_id).expect("topic exists");
        topic.stats.copies_enqueued += enqueued;
        topic.stats.copies_dropped += dropped;
        if qos == Some(QoS::AtLeastOnce) {
            self.reply(
                out,
                now,
                source,
                Packet::Puback { topic_id: p.topic_id, msg_id: p.msg_id, code: ReturnCode::Accepted },
            );
        }
    }

    fn drop_subscriptions(&mut self, client: &str) {
        if let Some(s) = self.sessions.get_mut(client) {
            for id in std::mem::take(&mut s.subscriptions) {
                if let Some(t) = self.topics.get_mut(&id) {
                    t.subscribers.retain(|c| c != client);
                }
            }
        }
    }

    pub fn next_release(&self) -> Option<SimTime> {
        self.egress.next_release()
    }

    /// Releases at most one buffered packet whose slot has come.
    pub fn drain(&mut self, now: SimTime) -> Option<Emission> {
        let entry = self.egress.pop_due(now)?;
        self.counters.sent += 1;
        let topic = entry.topic.and_then(|id| {
            let t = self.topics.get_mut(&id)?;
            t.stats.copies_sent += 1;
            Some(t.name.clone())
        });
        Some(Emission {
            dest: entry.dest,
            packet: entry.packet,
            topic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ms: u64) -> SimTime {
        SimTime(ms * 1000)
    }

    fn connect(b: &mut Broker, who: &str) {
        b.handle(
            t(0),
            who,
            Packet::Connect { flags: Flags(Flags::CLEAN_SESSION), duration: 60, client_id: who.into() },
        );
    }

    fn subscribe(b: &mut Broker, who: &str, topic: &str) -> u16 {
        let out = b.handle(
            t(0),
            who,
            Packet::Subscribe { flags: Flags::default(), msg_id: 1, topic_name: topic.into() },
        );
        match &out[..] {
            [Scheduled { packet: Packet::Suback { topic_id, .. }, .. }] => *topic_id,
            other => panic!("{other:?}"),
        }
    }

    fn publish(topic_id: u16) -> Packet {
        Packet::Publish(Publish { flags: Flags::default(), topic_id, msg_id: 0, data: vec![1] })
    }

    fn flush(b: &mut Broker) -> Vec<(SimTime, Emission)> {
        let mut out = Vec::new();
        while let Some(at) = b.next_release() {
            out.push((at, b.drain(at).unwrap()));
        }
        out
    }

    /// Broker with the radio releasing one packet per dispatch gap.
    fn single_rate(capacity: usize) -> Broker {
        Broker::new(BrokerConfig {
            dispatch_gap: Duration::from_millis(8),
            service_interval: Duration::from_millis(8),
            buffer_capacity: capacity,
        })
    }

    #[test]
    fn fan_out_is_staggered_in_subscription_order() {
        let mut b = Broker::new(BrokerConfig::default());
        for c in ["c", "a", "b", "pub"] {
            connect(&mut b, c);
        }
        flush(&mut b);
        let id = subscribe(&mut b, "c", "common");
        subscribe(&mut b, "a", "common");
        subscribe(&mut b, "b", "common");
        flush(&mut b);
        let sched = b.handle(t(100), "pub", publish(id));
        let got: Vec<(String, SimTime)> =
            sched.iter().map(|s| (s.dest.clone(), s.release_at)).collect();
        assert_eq!(
            got,
            vec![("c".into(), t(100)), ("a".into(), t(108)), ("b".into(), t(116))]
        );
        let sent = flush(&mut b);
        let times: Vec<SimTime> = sent.iter().map(|(at, _)| *at).collect();
        assert_eq!(times, vec![t(100), t(108), t(116)]);
        assert_eq!(sent[0].1.topic.as_deref(), Some("common"));
    }

    #[test]
    fn no_subscribers_no_emissions() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, "pub");
        flush(&mut b);
        let reg = b.handle(
            t(1),
            "pub",
            Packet::Register { topic_id: 0, msg_id: 1, topic_name: "empty".into() },
        );
        let Packet::Regack { topic_id, .. } = reg[0].packet else { panic!() };
        flush(&mut b);
        assert!(b.handle(t(2), "pub", publish(topic_id)).is_empty());
        assert!(flush(&mut b).is_empty());
        assert_eq!(b.topic_stats("empty").unwrap().publishes, 1);
    }

    #[test]
    fn tail_drop_when_stalled() {
        let mut b = single_rate(3);
        connect(&mut b, "sub");
        connect(&mut b, "pub");
        flush(&mut b);
        let id = subscribe(&mut b, "sub", "x");
        flush(&mut b);
        // Five publishes at the same instant: the radio cannot release anything in between.
        for _ in 0..5 {
            b.handle(t(50), "pub", publish(id));
        }
        assert_eq!(b.egress().len(), 3);
        assert_eq!(b.counters().buffer_dropped, 2);
        let stats = b.topic_stats("x").unwrap();
        assert_eq!(stats.copies_dropped, 2);
        assert_eq!(b.counters().first_drop.unwrap().topic_publishes, 4);
    }

    #[test]
    fn drain_releases_at_most_one_per_interval() {
        let mut b = single_rate(100);
        connect(&mut b, "s1");
        connect(&mut b, "pub");
        flush(&mut b);
        let id = subscribe(&mut b, "s1", "x");
        flush(&mut b);
        for _ in 0..4 {
            b.handle(t(200), "pub", publish(id));
        }
        assert!(b.drain(t(199)).is_none());
        assert!(b.drain(t(200)).is_some());
        assert!(b.drain(t(200)).is_none());
        assert!(b.drain(t(207)).is_none());
        assert!(b.drain(t(208)).is_some());
        assert_eq!(b.next_release(), Some(t(216)));
    }

    #[test]
    fn empty_buffer_drains_nothing() {
        let mut b = Broker::new(BrokerConfig::default());
        assert!(b.drain(t(5)).is_none());
        assert_eq!(b.next_release(), None);
    }

    #[test]
    fn unknown_session_gets_disconnect() {
        let mut b = Broker::new(BrokerConfig::default());
        let out = b.handle(t(0), "ghost", publish(1));
        assert!(matches!(out[0].packet, Packet::Disconnect));
        assert_eq!(b.counters().unknown_session, 1);
    }

    #[test]
    fn qos1_to_unknown_topic_is_rejected() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, "p");
        flush(&mut b);
        let out = b.handle(
            t(1),
            "p",
            Packet::Publish(Publish {
                flags: Flags::with_qos(QoS::AtLeastOnce),
                topic_id: 42,
                msg_id: 7,
                data: vec![],
            }),
        );
        assert!(matches!(
            out[0].packet,
            Packet::Puback { code: ReturnCode::RejectedInvalidTopicId, msg_id: 7, .. }
        ));
    }

    #[test]
    fn unsubscribe_and_clean_reconnect_remove_subscriber() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, "a");
        connect(&mut b, "b");
        subscribe(&mut b, "a", "t");
        subscribe(&mut b, "b", "t");
        b.handle(
            t(1),
            "a",
            Packet::Unsubscribe { flags: Flags::default(), msg_id: 2, topic_name: "t".into() },
        );
        assert_eq!(b.subscribers("t"), vec!["b".to_string()]);
        connect(&mut b, "b");
        assert!(b.subscribers("t").is_empty());
    }

    #[test]
    fn conservation_holds_under_overflow() {
        let mut b = Broker::new(BrokerConfig {
            dispatch_gap: Duration::from_millis(8),
            service_interval: Duration::from_millis(1),
            buffer_capacity: 20,
        });
        for c in ["s1", "s2", "s3", "pub"] {
            connect(&mut b, c);
        }
        flush(&mut b);
        let id = subscribe(&mut b, "s1", "x");
        subscribe(&mut b, "s2", "x");
        subscribe(&mut b, "s3", "x");
        flush(&mut b);
        let mut now = t(10);
        for k in 0..200u64 {
            b.handle(now, "pub", publish(id));
            // Release whatever is due before the next arrival.
            let next = now + Duration::from_micros(700);
            while let Some(at) = b.next_release() {
                if at > next {
                    break;
                }
                b.drain(at);
            }
            now = next;
            let s = b.topic_stats("x").unwrap();
            assert_eq!(s.copies_expected, 3 * (k + 1));
            assert_eq!(s.copies_expected, s.copies_sent + s.copies_dropped + b.buffered_for("x"));
            assert!(b.egress().len() <= 20);
        }
        assert!(b.topic_stats("x").unwrap().copies_dropped > 0);
    }
}
