//! Client side of an MQTT-SN connection.
//!
//! The session never touches a transport. Callers feed it received packets
//! and the current virtual time, then drain [`ClientSession::take_outbox`]
//! and [`ClientSession::poll_event`].

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::packet::{Flags, Packet, Publish, QoS, ReturnCode, MAX_PUBLISH_DATA};
use crate::time::{Duration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session is not active")]
    NotActive,
    #[error("session is already connected or connecting")]
    AlreadyConnected,
    #[error("topic id {0} is not registered in this session")]
    UnknownTopicId(u16),
    #[error("publish data of {0} octets exceeds the MQTT-SN limit")]
    Oversize(usize),
    #[error("no free message id")]
    MsgIdsExhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub interval: Duration,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            interval: Duration::from_millis(500),
            max_retries: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Disconnected,
    Connecting,
    Active,
}

/// Topic name to id registry; a bijection for the lifetime of the session.
#[derive(Clone, Debug, Default)]
pub struct TopicMap {
    by_name: BTreeMap<String, u16>,
    by_id: BTreeMap<u16, String>,
}

impl TopicMap {
    pub fn insert(&mut self, name: &str, id: u16) {
        if let Some(old) = self.by_name.insert(name.to_string(), id) {
            self.by_id.remove(&old);
        }
        if let Some(old_name) = self.by_id.insert(id, name.to_string()) {
            if old_name != name {
                self.by_name.remove(&old_name);
            }
        }
    }

    pub fn id(&self, name: &str) -> Option<u16> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.by_id.get(&id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn is_bijective(&self) -> bool {
        self.by_name.len() == self.by_id.len()
            && self
                .by_name
                .iter()
                .all(|(n, id)| self.by_id.get(id).map(String::as_str) == Some(n.as_str()))
    }
}

/// Identifies one `publish` call across retransmissions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublishHandle(pub u64);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopicRef {
    Name(String),
    Id(u16),
}

impl From<&str> for TopicRef {
    fn from(s: &str) -> Self {
        TopicRef::Name(s.to_string())
    }
}

impl From<String> for TopicRef {
    fn from(s: String) -> Self {
        TopicRef::Name(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SessionEvent {
    Connected,
    ConnectTimeout,
    ConnectRejected(ReturnCode),
    Registered { topic: String, topic_id: u16 },
    Subscribed { topic: String, topic_id: u16 },
    Unsubscribed { topic: String },
    /// A control exchange (REGISTER/SUBSCRIBE/UNSUBSCRIBE) ran out of retries.
    Timeout { request: &'static str, topic: String },
    Rejected { request: &'static str, topic: String, code: ReturnCode },
    /// First transmission of a publish hit the wire.
    PublishSent { handle: PublishHandle, topic_id: u16, msg_id: u16 },
    PublishAcked { handle: PublishHandle },
    PublishRejected { handle: PublishHandle, code: ReturnCode },
    RetriesExhausted { handle: PublishHandle },
    Message { topic_id: u16, topic: Option<String>, data: Vec<u8> },
    /// The broker dropped the session; all in-flight state was discarded.
    Disconnected,
}

#[derive(Clone, Debug)]
enum PendingKind {
    Register { topic: String },
    Subscribe { topic: String },
    Unsubscribe { topic: String },
    Publish { handle: PublishHandle },
}

#[derive(Clone, Debug)]
struct Pending {
    packet: Packet,
    kind: PendingKind,
    deadline: SimTime,
    retries: u32,
}

#[derive(Clone, Debug)]
struct QueuedPublish {
    handle: PublishHandle,
    topic: String,
    data: Vec<u8>,
    qos: QoS,
}

#[derive(Clone, Debug)]
pub struct ClientSession {
    client_id: String,
    state: SessionState,
    policy: RetryPolicy,
    keep_alive: u16,
    topics: TopicMap,
    next_msg_id: u16,
    next_handle: u64,
    connect_deadline: Option<SimTime>,
    pending: BTreeMap<u16, Pending>,
    awaiting_registration: Vec<QueuedPublish>,
    outbox: Vec<Packet>,
    events: VecDeque<SessionEvent>,
}

impl ClientSession {
    pub fn new(client_id: impl Into<String>, policy: RetryPolicy) -> Self {
        ClientSession {
            client_id: client_id.into(),
            state: SessionState::Disconnected,
            policy,
            keep_alive: 60,
            topics: TopicMap::default(),
            next_msg_id: 1,
            next_handle: 0,
            connect_deadline: None,
            pending: BTreeMap::new(),
            awaiting_registration: Vec::new(),
            outbox: Vec::new(),
            events: VecDeque::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }

    pub fn topics(&self) -> &TopicMap {
        &self.topics
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn connect(&mut self, now: SimTime) -> Result<(), SessionError> {
        if self.state != SessionState::Disconnected {
            return Err(SessionError::AlreadyConnected);
        }
        self.state = SessionState::Connecting;
        self.connect_deadline = Some(now + self.policy.interval);
        self.outbox.push(Packet::Connect {
            flags: Flags(Flags::CLEAN_SESSION),
            duration: self.keep_alive,
            client_id: self.client_id.clone(),
        });
        Ok(())
    }

    pub fn subscribe(&mut self, now: SimTime, topic: &str) -> Result<u16, SessionError> {
        self.require_active()?;
        let msg_id = self.alloc_msg_id()?;
        let packet = Packet::Subscribe {
            flags: Flags::with_qos(QoS::AtMostOnce),
            msg_id,
            topic_name: topic.to_string(),
        };
        self.send_tracked(now, msg_id, packet, PendingKind::Subscribe { topic: topic.to_string() });
        Ok(msg_id)
    }

    pub fn unsubscribe(&mut self, now: SimTime, topic: &str) -> Result<u16, SessionError> {
        self.require_active()?;
        let msg_id = self.alloc_msg_id()?;
        let packet = Packet::Unsubscribe {
            flags: Flags::default(),
            msg_id,
            topic_name: topic.to_string(),
        };
        self.send_tracked(now, msg_id, packet, PendingKind::Unsubscribe { topic: topic.to_string() });
        Ok(msg_id)
    }

    /// Starts a REGISTER exchange for `topic` unless it is known or already pending.
    pub fn register(&mut self, now: SimTime, topic: &str) -> Result<(), SessionError> {
        self.require_active()?;
        let registering = self
            .pending
            .values()
            .any(|p| matches!(&p.kind, PendingKind::Register { topic: t } if t == topic));
        if self.topics.id(topic).is_some() || registering {
            return Ok(());
        }
        let msg_id = self.alloc_msg_id()?;
        let packet = Packet::Register { topic_id: 0, msg_id, topic_name: topic.to_string() };
        self.send_tracked(now, msg_id, packet, PendingKind::Register { topic: topic.to_string() });
        Ok(())
    }

    /// Publishes `data`. Unknown topic names trigger a REGISTER exchange first.
    pub fn publish(
        &mut self,
        now: SimTime,
        topic: impl Into<TopicRef>,
        data: Vec<u8>,
        qos: QoS,
    ) -> Result<PublishHandle, SessionError> {
        self.require_active()?;
        if data.len() > MAX_PUBLISH_DATA {
            return Err(SessionError::Oversize(data.len()));
        }
        let topic_id = match topic.into() {
            TopicRef::Id(id) => {
                if self.topics.name(id).is_none() {
                    return Err(SessionError::UnknownTopicId(id));
                }
                id
            }
            TopicRef::Name(name) => match self.topics.id(&name) {
                Some(id) => id,
                None => {
                    let handle = self.alloc_handle();
                    self.register(now, &name)?;
                    self.awaiting_registration.push(QueuedPublish { handle, topic: name, data, qos });
                    return Ok(handle);
                }
            },
        };
        let handle = self.alloc_handle();
        self.emit_publish(now, handle, topic_id, data, qos)?;
        Ok(handle)
    }

    fn emit_publish(
        &mut self,
        now: SimTime,
        handle: PublishHandle,
        topic_id: u16,
        data: Vec<u8>,
        qos: QoS,
    ) -> Result<(), SessionError> {
        let msg_id = match qos {
            QoS::AtMostOnce => 0,
            QoS::AtLeastOnce => self.alloc_msg_id()?,
        };
        let packet = Packet::Publish(Publish {
            flags: Flags::with_qos(qos),
            topic_id,
            msg_id,
            data,
        });
        self.events.push_back(SessionEvent::PublishSent { handle, topic_id, msg_id });
        match qos {
            QoS::AtMostOnce => self.outbox.push(packet),
            QoS::AtLeastOnce => self.send_tracked(now, msg_id, packet, PendingKind::Publish { handle }),
        }
        Ok(())
    }

    pub fn handle(&mut self, now: SimTime, packet: Packet) {
        match packet {
            Packet::Connack { code } => {
                if self.state != SessionState::Connecting {
                    return;
                }
                self.connect_deadline = None;
                if code.is_accepted() {
                    self.state = SessionState::Active;
                    self.events.push_back(SessionEvent::Connected);
                } else {
                    self.state = SessionState::Disconnected;
                    self.events.push_back(SessionEvent::ConnectRejected(code));
                }
            }
            Packet::Regack { topic_id, msg_id, code } => {
                let Some(Pending { kind: PendingKind::Register { topic }, .. }) =
                    self.take_pending_if(msg_id, |k| matches!(k, PendingKind::Register { .. }))
                else {
                    return;
                };
                if code.is_accepted() {
                    self.topics.insert(&topic, topic_id);
                    self.events.push_back(SessionEvent::Registered { topic: topic.clone(), topic_id });
                    self.flush_registered(now, &topic, topic_id);
                } else {
                    self.events.push_back(SessionEvent::Rejected { request: "REGISTER", topic: topic.clone(), code });
                    self.fail_registration(&topic, code);
                }
            }
            Packet::Suback { topic_id, msg_id, code, .. } => {
                let Some(Pending { kind: PendingKind::Subscribe { topic }, .. }) =
                    self.take_pending_if(msg_id, |k| matches!(k, PendingKind::Subscribe { .. }))
                else {
                    return;
                };
                if code.is_accepted() {
                    self.topics.insert(&topic, topic_id);
                    self.events.push_back(SessionEvent::Subscribed { topic: topic.clone(), topic_id });
                    self.flush_registered(now, &topic, topic_id);
                } else {
                    self.events.push_back(SessionEvent::Rejected { request: "SUBSCRIBE", topic, code });
                }
            }
            Packet::Unsuback { msg_id } => {
                if let Some(Pending { kind: PendingKind::Unsubscribe { topic }, .. }) =
                    self.take_pending_if(msg_id, |k| matches!(k, PendingKind::Unsubscribe { .. }))
                {
                    self.events.push_back(SessionEvent::Unsubscribed { topic });
                }
            }
            Packet::Puback { msg_id, code, .. } => {
                if let Some(Pending { kind: PendingKind::Publish { handle }, .. }) =
                    self.take_pending_if(msg_id, |k| matches!(k, PendingKind::Publish { .. }))
                {
                    if code.is_accepted() {
                        self.events.push_back(SessionEvent::PublishAcked { handle });
                    } else {
                        self.events.push_back(SessionEvent::PublishRejected { handle, code });
                    }
                }
            }
            Packet::Publish(p) => {
                if self.state != SessionState::Active {
                    return;
                }
                if p.flags.qos() == Some(QoS::AtLeastOnce) {
                    self.outbox.push(Packet::Puback {
                        topic_id: p.topic_id,
                        msg_id: p.msg_id,
                        code: ReturnCode::Accepted,
                    });
                }
                self.events.push_back(SessionEvent::Message {
                    topic_id: p.topic_id,
                    topic: self.topics.name(p.topic_id).map(str::to_string),
                    data: p.data,
                });
            }
            Packet::Register { topic_id, msg_id, topic_name } => {
                // Broker-initiated registration.
                self.topics.insert(&topic_name, topic_id);
                self.outbox.push(Packet::Regack { topic_id, msg_id, code: ReturnCode::Accepted });
            }
            Packet::Disconnect => {
                if self.state != SessionState::Disconnected {
                    self.reset();
                    self.events.push_back(SessionEvent::Disconnected);
                }
            }
            Packet::Connect { .. } | Packet::Subscribe { .. } | Packet::Unsubscribe { .. } => {}
        }
    }

    /// Drives retransmissions and timeouts up to `now`.
    pub fn poll(&mut self, now: SimTime) {
        if let Some(deadline) = self.connect_deadline {
            if now >= deadline && self.state == SessionState::Connecting {
                self.connect_deadline = None;
                self.state = SessionState::Disconnected;
                self.events.push_back(SessionEvent::ConnectTimeout);
            }
        }
        let due: Vec<u16> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(id, _)| *id)
            .collect();
        for msg_id in due {
            let Some(mut p) = self.pending.remove(&msg_id) else { continue };
            if p.retries < self.policy.max_retries {
                p.retries += 1;
                p.deadline = now + self.policy.interval;
                let resend = match &p.packet {
                    Packet::Publish(publish) => Packet::Publish(Publish {
                        flags: publish.flags.set_dup(),
                        ..publish.clone()
                    }),
                    other => other.clone(),
                };
                self.outbox.push(resend);
                self.pending.insert(msg_id, p);
                continue;
            }
            match p.kind {
                PendingKind::Publish { handle } => {
                    self.events.push_back(SessionEvent::RetriesExhausted { handle })
                }
                PendingKind::Register { topic } => {
                    self.events.push_back(SessionEvent::Timeout { request: "REGISTER", topic: topic.clone() });
                    self.fail_registration(&topic, ReturnCode::RejectedCongestion);
                }
                PendingKind::Subscribe { topic } => {
                    self.events.push_back(SessionEvent::Timeout { request: "SUBSCRIBE", topic })
                }
                PendingKind::Unsubscribe { topic } => {
                    self.events.push_back(SessionEvent::Timeout { request: "UNSUBSCRIBE", topic })
                }
            }
        }
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        let pending = self.pending.values().map(|p| p.deadline).min();
        match (pending, self.connect_deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn take_outbox(&mut self) -> Vec<Packet> {
        std::mem::take(&mut self.outbox)
    }

    pub fn poll_event(&mut self) -> Option<SessionEvent> {
        self.events.pop_front()
    }

    /// Forgets everything learned from the broker and returns to Disconnected.
    pub fn reset(&mut self) {
        self.state = SessionState::Disconnected;
        self.topics = TopicMap::default();
        self.pending.clear();
        self.awaiting_registration.clear();
        self.connect_deadline = None;
    }

    fn require_active(&self) -> Result<(), SessionError> {
        if self.state == SessionState::Active {
            Ok(())
        } else {
            Err(SessionError::NotActive)
        }
    }

    fn alloc_handle(&mut self) -> PublishHandle {
        self.next_handle += 1;
        PublishHandle(self.next_handle)
    }

    fn alloc_msg_id(&mut self) -> Result<u16, SessionError> {
        for _ in 0..u16::MAX {
            let id = self.next_msg_id;
            self.next_msg_id = if id == u16::MAX { 1 } else { id + 1 };
            if !self.pending.contains_key(&id) {
                return Ok(id);
            }
        }
        Err(SessionError::MsgIdsExhausted)
    }

    fn send_tracked(&mut self, now: SimTime, msg_id: u16, packet: Packet, kind: PendingKind) {
        self.outbox.push(packet.clone());
        self.pending.insert(
            msg_id,
            Pending {
                packet,
                kind,
                deadline: now + self.policy.interval,
                retries: 0,
            },
        );
    }

    fn take_pending_if(&mut self, msg_id: u16, pred: impl Fn(&PendingKind) -> bool) -> Option<Pending> {
        if self.pending.get(&msg_id).is_some_and(|p| pred(&p.kind)) {
            self.pending.remove(&msg_id)
        } else {
            None
        }
    }

    fn flush_registered(&mut self, now: SimTime, topic: &str, topic_id: u16) {
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.awaiting_registration)
            .into_iter()
            .partition(|q| q.topic == topic);
        self.awaiting_registration = waiting;
        for q in ready {
            // Only fails when msg ids are exhausted; the publish is dropped like a QoS 0 loss.
            let _ = self.emit_publish(now, q.handle, topic_id, q.data, q.qos);
        }
    }

    fn fail_registration(&mut self, topic: &str, code: ReturnCode) {
        let (failed, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.awaiting_registration)
            .into_iter()
            .partition(|q| q.topic == topic);
        self.awaiting_registration = waiting;
        for q in failed {
            self.events.push_back(SessionEvent::PublishRejected { handle: q.handle, code });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ms: u64) -> SimTime {
        SimTime(ms * 1000)
    }

    fn active() -> ClientSession {
        let mut s = ClientSession::new("fe80::1", RetryPolicy::default());
        s.connect(t(0)).unwrap();
        assert!(matches!(s.take_outbox()[..], [Packet::Connect { .. }]));
        s.handle(t(1), Packet::Connack { code: ReturnCode::Accepted });
        assert_eq!(s.poll_event(), Some(SessionEvent::Connected));
        s
    }

    fn drain_events(s: &mut ClientSession) -> Vec<SessionEvent> {
        std::iter::from_fn(|| s.poll_event()).collect()
    }

    #[test]
    fn connect_uses_client_id_and_times_out() {
        let mut s = ClientSession::new("fe80::212:4b00:abcd:1234", RetryPolicy::default());
        s.connect(t(0)).unwrap();
        match &s.take_outbox()[..] {
            [Packet::Connect { client_id, .. }] => assert_eq!(client_id, "fe80::212:4b00:abcd:1234"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.state(), SessionState::Connecting);
        s.poll(t(499));
        assert_eq!(s.state(), SessionState::Connecting);
        s.poll(t(500));
        assert_eq!(s.state(), SessionState::Disconnected);
        assert_eq!(s.poll_event(), Some(SessionEvent::ConnectTimeout));
        // caller retries
        s.connect(t(500)).unwrap();
        assert_eq!(s.state(), SessionState::Connecting);
    }

    #[test]
    fn operations_require_active() {
        let mut s = ClientSession::new("a", RetryPolicy::default());
        assert_eq!(s.subscribe(t(0), "x"), Err(SessionError::NotActive));
        assert_eq!(s.publish(t(0), "x", vec![], QoS::AtMostOnce), Err(SessionError::NotActive));
    }

    #[test]
    fn subscribe_records_topic_id() {
        let mut s = active();
        let msg_id = s.subscribe(t(2), "common").unwrap();
        s.take_outbox();
        s.handle(
            t(3),
            Packet::Suback { flags: Flags::default(), topic_id: 4, msg_id, code: ReturnCode::Accepted },
        );
        assert_eq!(s.topics().id("common"), Some(4));
        assert_eq!(
            s.poll_event(),
            Some(SessionEvent::Subscribed { topic: "common".into(), topic_id: 4 })
        );
        assert!(s.topics().is_bijective());
    }

    #[test]
    fn register_precedes_publish_for_unknown_topic() {
        let mut s = active();
        s.publish(t(2), "init-info", vec![1, 2], QoS::AtMostOnce).unwrap();
        let out = s.take_outbox();
        let msg_id = match &out[..] {
            [Packet::Register { topic_name, msg_id, .. }] => {
                assert_eq!(topic_name, "init-info");
                *msg_id
            }
            other => panic!("expected REGISTER only, got {other:?}"),
        };
        s.handle(t(3), Packet::Regack { topic_id: 9, msg_id, code: ReturnCode::Accepted });
        match &s.take_outbox()[..] {
            [Packet::Publish(p)] => {
                assert_eq!(p.topic_id, 9);
                assert_eq!(p.data, vec![1, 2]);
            }
            other => panic!("{other:?}"),
        }
        // second publish goes straight out
        s.publish(t(4), "init-info", vec![3], QoS::AtMostOnce).unwrap();
        assert!(matches!(&s.take_outbox()[..], [Packet::Publish(_)]));
    }

    #[test]
    fn explicit_register_is_idempotent() {
        let mut s = active();
        s.register(t(2), "common").unwrap();
        s.register(t(2), "common").unwrap();
        let out = s.take_outbox();
        let [Packet::Register { msg_id, .. }] = out[..] else { panic!("{out:?}") };
        s.handle(t(3), Packet::Regack { topic_id: 4, msg_id, code: ReturnCode::Accepted });
        assert_eq!(s.topics().id("common"), Some(4));
        s.register(t(4), "common").unwrap();
        assert!(s.take_outbox().is_empty());
        s.publish(t(5), "common", vec![7], QoS::AtMostOnce).unwrap();
        assert!(matches!(&s.take_outbox()[..], [Packet::Publish(p)] if p.topic_id == 4));
    }

    #[test]
    fn concurrent_publishes_share_one_register() {
        let mut s = active();
        s.publish(t(2), "x", vec![1], QoS::AtMostOnce).unwrap();
        s.publish(t(2), "x", vec![2], QoS::AtMostOnce).unwrap();
        let out = s.take_outbox();
        assert_eq!(out.len(), 1);
        let Packet::Register { msg_id, .. } = out[0] else { panic!() };
        s.handle(t(3), Packet::Regack { topic_id: 2, msg_id, code: ReturnCode::Accepted });
        let out = s.take_outbox();
        let data: Vec<Vec<u8>> = out
            .into_iter()
            .map(|p| match p {
                Packet::Publish(p) => p.data,
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(data, vec![vec![1], vec![2]]);
    }

    #[test]
    fn publish_by_unknown_id_is_refused() {
        let mut s = active();
        assert_eq!(
            s.publish(t(2), TopicRef::Id(77), vec![], QoS::AtMostOnce),
            Err(SessionError::UnknownTopicId(77))
        );
        assert!(s.take_outbox().is_empty());
    }

    fn registered(topic_id: u16) -> ClientSession {
        let mut s = active();
        let msg_id = s.subscribe(t(0), "t").unwrap();
        s.handle(
            t(0),
            Packet::Suback { flags: Flags::default(), topic_id, msg_id, code: ReturnCode::Accepted },
        );
        s.take_outbox();
        drain_events(&mut s);
        s
    }

    #[test]
    fn qos1_retransmits_with_same_msg_id_then_acks_once() {
        let mut s = registered(3);
        let h = s.publish(t(10), "t", vec![5], QoS::AtLeastOnce).unwrap();
        let first = match s.take_outbox().pop() {
            Some(Packet::Publish(p)) => p,
            other => panic!("{other:?}"),
        };
        assert!(!first.flags.dup());
        assert_eq!(s.next_deadline(), Some(t(510)));
        s.poll(t(510));
        let second = match s.take_outbox().pop() {
            Some(Packet::Publish(p)) => p,
            other => panic!("{other:?}"),
        };
        assert!(second.flags.dup());
        assert_eq!(second.msg_id, first.msg_id);
        let ack = Packet::Puback { topic_id: 3, msg_id: first.msg_id, code: ReturnCode::Accepted };
        s.handle(t(520), ack.clone());
        s.handle(t(521), ack);
        let acks = drain_events(&mut s)
            .into_iter()
            .filter(|e| *e == SessionEvent::PublishAcked { handle: h })
            .count();
        assert_eq!(acks, 1);
        assert_eq!(s.in_flight(), 0);
    }

    #[test]
    fn qos1_gives_up_after_retries() {
        let mut s = registered(3);
        let h = s.publish(t(0), "t", vec![5], QoS::AtLeastOnce).unwrap();
        s.take_outbox();
        let mut sends = 0;
        for step in 1..=10 {
            s.poll(t(step * 500));
            sends += s.take_outbox().len();
        }
        assert_eq!(sends, 3);
        assert!(drain_events(&mut s).contains(&SessionEvent::RetriesExhausted { handle: h }));
    }

    #[test]
    fn qos0_has_no_retransmission() {
        let mut s = registered(3);
        s.publish(t(0), "t", vec![5], QoS::AtMostOnce).unwrap();
        assert_eq!(s.take_outbox().len(), 1);
        assert_eq!(s.next_deadline(), None);
        s.poll(t(10_000));
        assert!(s.take_outbox().is_empty());
    }

    #[test]
    fn incoming_publish_is_named() {
        let mut s = registered(3);
        s.handle(
            t(1),
            Packet::Publish(Publish { flags: Flags::default(), topic_id: 3, msg_id: 0, data: vec![9] }),
        );
        assert_eq!(
            s.poll_event(),
            Some(SessionEvent::Message { topic_id: 3, topic: Some("t".into()), data: vec![9] })
        );
    }

    #[test]
    fn disconnect_resets() {
        let mut s = registered(3);
        s.handle(t(1), Packet::Disconnect);
        assert_eq!(s.state(), SessionState::Disconnected);
        assert!(s.topics().is_empty());
        assert_eq!(s.poll_event(), Some(SessionEvent::Disconnected));
    }

    #[test]
    fn topic_map_stays_bijective_on_rebind() {
        let mut m = TopicMap::default();
        m.insert("a", 1);
        m.insert("b", 2);
        m.insert("a", 3);
        m.insert("c", 2);
        assert!(m.is_bijective());
        assert_eq!(m.id("a"), Some(3));
        assert_eq!(m.name(2), Some("c"));
        assert_eq!(m.id("b"), None);
    }
}
