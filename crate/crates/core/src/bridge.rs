//! Relay between two broker networks.
//!
//! Each network runs one endpoint next to its broker. The endpoint subscribes
//! to the allowed topics and forwards untagged publishes over the relay,
//! appending its origin tag octet after the ROMANO message. The far endpoint
//! republishes the tagged data unchanged. Tagged data is never forwarded
//! again, so every message crosses the relay at most once.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::mqttsn::{ClientSession, Packet, QoS, RetryPolicy, SessionEvent, SessionState};
use crate::time::SimTime;

pub const DEFAULT_QUEUE_BOUND: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("relay frame too short")]
    Truncated,
    #[error("relay frame topic is not UTF-8")]
    InvalidTopic,
}

/// Relay frame: `[topic_len][topic][data]`, where data already carries the origin tag.
pub fn encode_relay(topic: &str, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + topic.len() + data.len());
    out.push(topic.len() as u8);
    out.extend_from_slice(topic.as_bytes());
    out.extend_from_slice(data);
    out
}

pub fn decode_relay(frame: &[u8]) -> Result<(String, Vec<u8>), RelayError> {
    let n = *frame.first().ok_or(RelayError::Truncated)? as usize;
    if frame.len() < 1 + n {
        return Err(RelayError::Truncated);
    }
    let topic = std::str::from_utf8(&frame[1..1 + n]).map_err(|_| RelayError::InvalidTopic)?;
    Ok((topic.to_string(), frame[1 + n..].to_vec()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeCounters {
    /// Local publishes sent (or queued) towards the peer.
    pub forwarded: u64,
    /// Frames received from the peer and republished locally.
    pub republished: u64,
    /// Tagged messages seen locally and not forwarded.
    pub suppressed: u64,
    pub queued_while_down: u64,
    pub queue_dropped: u64,
    pub rejected_topic: u64,
    pub malformed: u64,
}

/// One crossing of the relay, as recorded by the sending endpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub at: SimTime,
    pub origin: u8,
    pub topic: String,
    /// The ROMANO message without the tag.
    pub message: Vec<u8>,
}

pub struct BridgeEndpoint {
    tag: u8,
    allow: BTreeSet<String>,
    session: ClientSession,
    relay_up: bool,
    queue: VecDeque<Vec<u8>>,
    queue_bound: usize,
    outbound: Vec<Vec<u8>>,
    counters: BridgeCounters,
    crossings: Vec<Crossing>,
    subscribed: BTreeSet<String>,
}

impl BridgeEndpoint {
    pub fn new(client_id: &str, tag: u8, allow: impl IntoIterator<Item = String>, queue_bound: usize) -> Self {
        BridgeEndpoint {
            tag,
            allow: allow.into_iter().collect(),
            session: ClientSession::new(client_id, RetryPolicy::default()),
            relay_up: true,
            queue: VecDeque::new(),
            queue_bound,
            outbound: Vec::new(),
            counters: BridgeCounters::default(),
            crossings: Vec::new(),
            subscribed: BTreeSet::new(),
        }
    }

    pub fn tag(&self) -> u8 {
        self.tag
    }

    pub fn counters(&self) -> BridgeCounters {
        self.counters
    }

    pub fn crossings(&self) -> &[Crossing] {
        &self.crossings
    }

    pub fn allows(&self, topic: &str) -> bool {
        self.allow.contains(topic)
    }

    /// True once subscribed to every allowed topic.
    pub fn is_ready(&self) -> bool {
        self.session.is_active() && self.subscribed == self.allow
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn start(&mut self, now: SimTime) {
        if self.session.state() == SessionState::Disconnected {
            let _ = self.session.connect(now);
        }
    }

    pub fn set_relay_up(&mut self, up: bool) {
        self.relay_up = up;
        if up {
            self.outbound.extend(self.queue.drain(..));
        }
    }

    pub fn handle_packet(&mut self, now: SimTime, packet: Packet) {
        self.session.handle(now, packet);
        self.process(now);
    }

    pub fn poll(&mut self, now: SimTime) {
        self.session.poll(now);
        self.process(now);
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        self.session.next_deadline()
    }

    pub fn take_outbox(&mut self) -> Vec<Packet> {
        self.session.take_outbox()
    }

    /// Frames to put on the relay link.
    pub fn take_relay_frames(&mut self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.outbound)
    }

    /// Republishes a frame that arrived from the peer.
    pub fn on_relay_frame(&mut self, now: SimTime, frame: &[u8]) {
        let Ok((topic, data)) = decode_relay(frame) else {
            self.counters.malformed += 1;
            return;
        };
        if !self.allows(&topic) {
            self.counters.rejected_topic += 1;
            return;
        }
        if self.session.publish(now, topic.as_str(), data, QoS::AtMostOnce).is_ok() {
            self.counters.republished += 1;
        }
    }

    fn process(&mut self, now: SimTime) {
        while let Some(ev) = self.session.poll_event() {
            match ev {
                SessionEvent::Connected => {
                    self.subscribed.clear();
                    for t in self.allow.clone() {
                        let _ = self.session.subscribe(now, &t);
                    }
                }
                SessionEvent::ConnectTimeout | SessionEvent::ConnectRejected(_) | SessionEvent::Disconnected => {
                    let _ = self.session.connect(now);
                }
                SessionEvent::Subscribed { topic, .. } => {
                    self.subscribed.insert(topic);
                }
                SessionEvent::Timeout { request: "SUBSCRIBE", topic } => {
                    let _ = self.session.subscribe(now, &topic);
                }
                SessionEvent::Message { topic: Some(topic), data, .. } => self.on_local(now, topic, data),
                _ => {}
            }
        }
    }

    fn on_local(&mut self, now: SimTime, topic: String, data: Vec<u8>) {
        if !self.allows(&topic) {
            self.counters.rejected_topic += 1;
            return;
        }
        let Some((message, trailer)) = codec::split_frame(&data) else {
            self.counters.malformed += 1;
            return;
        };
        if !trailer.is_empty() {
            self.counters.suppressed += 1;
            return;
        }
        let mut tagged = message.to_vec();
        tagged.push(self.tag);
        self.crossings.push(Crossing { at: now, origin: self.tag, topic: topic.clone(), message: message.to_vec() });
        self.counters.forwarded += 1;
        let frame = encode_relay(&topic, &tagged);
        if self.relay_up {
            self.outbound.push(frame);
        } else {
            self.counters.queued_while_down += 1;
            if self.queue.len() >= self.queue_bound {
                self.queue.pop_front();
                self.counters.queue_dropped += 1;
            }
            self.queue.push_back(frame);
        }
    }
}
