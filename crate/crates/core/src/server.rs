//! ROMANO registry server: acknowledges joins and answers roster queries.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::codec::{self, RomanoId, RomanoMessage};
use crate::mqttsn::{ClientSession, Packet, PublishHandle, QoS, RetryPolicy, SessionEvent, SessionState};
use crate::node::{NodeError, COMMON_TOPIC, INIT_INFO_TOPIC};
use crate::time::{Duration, SimTime};

/// Largest number of ids one ConnectedNodesInfo message can carry.
pub const ROSTER_CHUNK: usize = codec::MAX_PAYLOAD / RomanoId::LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub retry: RetryPolicy,
    /// Subscribe to "common" and evict nodes after `eviction_periods` silent periods.
    pub heartbeat_tracking: Option<Duration>,
    pub eviction_periods: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            retry: RetryPolicy::default(),
            heartbeat_tracking: None,
            eviction_periods: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub join_time: SimTime,
    pub last_heartbeat: Option<SimTime>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub joins: u64,
    pub acks_sent: u64,
    pub roster_requests: u64,
    pub roster_messages: u64,
    pub unknown_requesters: u64,
    pub evicted: u64,
    pub ignored: u64,
}

pub struct RegistryServer {
    config: ServerConfig,
    session: ClientSession,
    registry: IndexMap<RomanoId, NodeRecord>,
    pending_subs: usize,
    ready: bool,
    stats: ServerStats,
    published: Vec<(SimTime, PublishHandle)>,
}

impl RegistryServer {
    pub fn new(client_id: &str, config: ServerConfig) -> Self {
        RegistryServer {
            config,
            session: ClientSession::new(client_id, config.retry),
            registry: IndexMap::new(),
            pending_subs: 0,
            ready: false,
            stats: ServerStats::default(),
            published: Vec::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        self.session.client_id()
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    /// Registered nodes in join order.
    pub fn registry(&self) -> &IndexMap<RomanoId, NodeRecord> {
        &self.registry
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    /// Handles and times of every publish that reached the wire.
    pub fn sent_publishes(&self) -> &[(SimTime, PublishHandle)] {
        &self.published
    }

    pub fn start(&mut self, now: SimTime) {
        if self.session.state() == SessionState::Disconnected {
            let _ = self.session.connect(now);
        }
    }

    pub fn handle_packet(&mut self, now: SimTime, packet: Packet) {
        self.session.handle(now, packet);
        self.process(now);
    }

    pub fn poll(&mut self, now: SimTime) {
        self.session.poll(now);
        self.process(now);
        self.evict_stale(now);
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        let eviction = self.config.heartbeat_tracking.and_then(|p| {
            let window = p.times(self.config.eviction_periods as u64);
            self.registry
                .values()
                .map(|r| r.last_heartbeat.unwrap_or(r.join_time) + window + Duration(1))
                .min()
        });
        [self.session.next_deadline(), eviction].into_iter().flatten().min()
    }

    pub fn take_outbox(&mut self) -> Vec<Packet> {
        self.session.take_outbox()
    }

    /// Registers a topic ahead of the first publish on it.
    pub fn register(&mut self, now: SimTime, topic: &str) -> Result<(), NodeError> {
        Ok(self.session.register(now, topic)?)
    }

    pub fn publish(
        &mut self,
        now: SimTime,
        topic: &str,
        msg: &RomanoMessage,
        qos: QoS,
    ) -> Result<PublishHandle, NodeError> {
        let bytes = codec::encode(msg)?;
        Ok(self.session.publish(now, topic, bytes, qos)?)
    }

    fn process(&mut self, now: SimTime) {
        while let Some(ev) = self.session.poll_event() {
            match ev {
                SessionEvent::Connected => {
                    self.pending_subs = 1;
                    let _ = self.session.subscribe(now, INIT_INFO_TOPIC);
                    if self.config.heartbeat_tracking.is_some() {
                        self.pending_subs += 1;
                        let _ = self.session.subscribe(now, COMMON_TOPIC);
                    }
                }
                SessionEvent::ConnectTimeout | SessionEvent::ConnectRejected(_) => {
                    let _ = self.session.connect(now);
                }
                SessionEvent::Subscribed { .. } => {
                    self.pending_subs = self.pending_subs.saturating_sub(1);
                    self.ready = self.pending_subs == 0;
                }
                SessionEvent::Timeout { request: "SUBSCRIBE", topic } => {
                    let _ = self.session.subscribe(now, &topic);
                }
                SessionEvent::Disconnected => {
                    self.ready = false;
                    let _ = self.session.connect(now);
                }
                SessionEvent::PublishSent { handle, .. } => self.published.push((now, handle)),
                SessionEvent::Message { topic, data, .. } => self.on_data(now, topic.as_deref(), &data),
                _ => {}
            }
        }
    }

    fn on_data(&mut self, now: SimTime, topic: Option<&str>, data: &[u8]) {
        let msg = codec::split_frame(data).and_then(|(frame, _)| codec::decode(frame).ok());
        match (topic, msg) {
            (Some(INIT_INFO_TOPIC), Some(RomanoMessage::ConnectionRequest { id })) => self.on_init_info(now, id),
            (Some(INIT_INFO_TOPIC), Some(RomanoMessage::RequestConnectedNodesInfo { id })) => {
                self.on_nodes_request(now, id)
            }
            (Some(COMMON_TOPIC), Some(RomanoMessage::Heartbeat { id })) => {
                if let Some(r) = self.registry.get_mut(&id) {
                    r.last_heartbeat = Some(now);
                }
            }
            _ => self.stats.ignored += 1,
        }
    }

    /// Records the node (idempotently) and acknowledges on its id topic.
    pub fn on_init_info(&mut self, now: SimTime, id: RomanoId) {
        self.stats.joins += 1;
        let entry = self.registry.entry(id).or_insert(NodeRecord { join_time: now, last_heartbeat: None });
        entry.join_time = now;
        if self.publish(now, id.as_str(), &RomanoMessage::ConnectionAck, QoS::AtMostOnce).is_ok() {
            self.stats.acks_sent += 1;
        }
    }

    /// Publishes the roster to the requester's id topic, 31 ids per message.
    pub fn on_nodes_request(&mut self, now: SimTime, requester: RomanoId) {
        self.stats.roster_requests += 1;
        for msg in self.roster_for(requester) {
            if self.publish(now, requester.as_str(), &msg, QoS::AtMostOnce).is_ok() {
                self.stats.roster_messages += 1;
            }
        }
    }

    /// Roster messages for `requester`: one empty message when it is not registered.
    pub fn roster_for(&mut self, requester: RomanoId) -> Vec<RomanoMessage> {
        if !self.registry.contains_key(&requester) {
            self.stats.unknown_requesters += 1;
            return vec![RomanoMessage::ConnectedNodesInfo { ids: Vec::new() }];
        }
        roster_messages(self.registry.keys().copied())
    }

    fn evict_stale(&mut self, now: SimTime) {
        let Some(period) = self.config.heartbeat_tracking else { return };
        let window = period.times(self.config.eviction_periods as u64);
        let before = self.registry.len();
        self.registry
            .retain(|_, r| now.saturating_since(r.last_heartbeat.unwrap_or(r.join_time)) <= window);
        self.stats.evicted += (before - self.registry.len()) as u64;
    }
}

/// Splits a roster into ConnectedNodesInfo messages of at most [`ROSTER_CHUNK`] ids.
pub fn roster_messages(ids: impl IntoIterator<Item = RomanoId>) -> Vec<RomanoMessage> {
    let ids: Vec<RomanoId> = ids.into_iter().collect();
    if ids.is_empty() {
        return vec![RomanoMessage::ConnectedNodesInfo { ids }];
    }
    ids.chunks(ROSTER_CHUNK)
        .map(|c| RomanoMessage::ConnectedNodesInfo { ids: c.to_vec() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mqttsn::{Flags, Publish, ReturnCode};
    use std::collections::BTreeMap;

    fn t(ms: u64) -> SimTime {
        SimTime(ms * 1000)
    }

    struct Harness {
        server: RegistryServer,
        ids: BTreeMap<String, u16>,
    }

    impl Harness {
        fn new(config: ServerConfig) -> Self {
            let mut h = Harness { server: RegistryServer::new("fe80::1", config), ids: BTreeMap::new() };
            h.server.start(t(0));
            for _ in 0..3 {
                h.pump(t(0));
            }
            assert!(h.server.is_ready());
            h
        }

        fn topic_id(&mut self, name: &str) -> u16 {
            let n = self.ids.len() as u16 + 1;
            *self.ids.entry(name.to_string()).or_insert(n)
        }

        /// Answers control packets and returns the publishes as (topic, message).
        fn pump(&mut self, now: SimTime) -> Vec<(String, RomanoMessage)> {
            let mut pubs = Vec::new();
            for p in self.server.take_outbox() {
                let reply = match p {
                    Packet::Connect { .. } => Some(Packet::Connack { code: ReturnCode::Accepted }),
                    Packet::Subscribe { msg_id, topic_name, .. } => Some(Packet::Suback {
                        flags: Flags::default(),
                        topic_id: self.topic_id(&topic_name),
                        msg_id,
                        code: ReturnCode::Accepted,
                    }),
                    Packet::Register { msg_id, topic_name, .. } => Some(Packet::Regack {
                        topic_id: self.topic_id(&topic_name),
                        msg_id,
                        code: ReturnCode::Accepted,
                    }),
                    Packet::Publish(p) => {
                        let name = self.ids.iter().find(|(_, v)| **v == p.topic_id).unwrap().0.clone();
                        pubs.push((name, codec::decode(&p.data).unwrap()));
                        None
                    }
                    _ => None,
                };
                if let Some(r) = reply {
                    self.server.handle_packet(now, r);
                }
            }
            pubs
        }

        fn inject(&mut self, now: SimTime, topic: &str, msg: &RomanoMessage) -> Vec<(String, RomanoMessage)> {
            let topic_id = self.topic_id(topic);
            self.server.handle_packet(
                now,
                Packet::Publish(Publish {
                    flags: Flags::default(),
                    topic_id,
                    msg_id: 0,
                    data: codec::encode(msg).unwrap(),
                }),
            );
            let mut out = self.pump(now);
            out.extend(self.pump(now));
            out
        }
    }

    fn id(s: &str) -> RomanoId {
        s.parse().unwrap()
    }

    #[test]
    fn join_is_acked_on_id_topic() {
        let mut h = Harness::new(ServerConfig::default());
        let out = h.inject(t(5), "init-info", &RomanoMessage::ConnectionRequest { id: id("abcd1234") });
        assert_eq!(out, vec![("abcd1234".to_string(), RomanoMessage::ConnectionAck)]);
        assert_eq!(h.server.registry().len(), 1);
    }

    #[test]
    fn duplicate_join_acks_again_without_duplicating() {
        let mut h = Harness::new(ServerConfig::default());
        let join = RomanoMessage::ConnectionRequest { id: id("abcd1234") };
        h.inject(t(5), "init-info", &join);
        let out = h.inject(t(9), "init-info", &join);
        assert_eq!(out.len(), 1);
        assert_eq!(h.server.registry().len(), 1);
        assert_eq!(h.server.registry()[&id("abcd1234")].join_time, t(9));
    }

    #[test]
    fn five_joins_five_acks() {
        let mut h = Harness::new(ServerConfig::default());
        let mut acks = 0;
        for i in 1..=5u32 {
            acks += h.inject(t(i as u64), "init-info", &RomanoMessage::ConnectionRequest { id: RomanoId::from_u32(i) }).len();
        }
        assert_eq!(acks, 5);
        assert_eq!(h.server.registry().len(), 5);
        assert_eq!(h.server.stats().acks_sent, 5);
    }

    #[test]
    fn roster_lists_registry_in_join_order() {
        let mut h = Harness::new(ServerConfig::default());
        let members = [id("0000000a"), id("0000000b"), id("0000000c")];
        for m in members {
            h.inject(t(1), "init-info", &RomanoMessage::ConnectionRequest { id: m });
        }
        let out = h.inject(t(2), "init-info", &RomanoMessage::RequestConnectedNodesInfo { id: members[0] });
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, "0000000a");
        let RomanoMessage::ConnectedNodesInfo { ids } = &out[0].1 else { panic!() };
        assert_eq!(ids, &members);
        assert_eq!(codec::encode(&out[0].1).unwrap().len(), 2 + 24);
    }

    #[test]
    fn unknown_requester_gets_empty_roster() {
        let mut h = Harness::new(ServerConfig::default());
        let out = h.inject(t(2), "init-info", &RomanoMessage::RequestConnectedNodesInfo { id: id("00000009") });
        assert_eq!(out, vec![("00000009".to_string(), RomanoMessage::ConnectedNodesInfo { ids: vec![] })]);
    }

    #[test]
    fn rosters_split_at_31() {
        let full = roster_messages((0..31).map(RomanoId::from_u32));
        assert_eq!(full.len(), 1);
        assert_eq!(codec::encode(&full[0]).unwrap().len(), 2 + 248);
        let over = roster_messages((0..70).map(RomanoId::from_u32));
        let sizes: Vec<usize> = over
            .iter()
            .map(|m| match m {
                RomanoMessage::ConnectedNodesInfo { ids } => ids.len(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(sizes, vec![31, 31, 8]);
    }

    #[test]
    fn stale_nodes_are_evicted_when_tracking() {
        let config = ServerConfig { heartbeat_tracking: Some(Duration::from_secs(1)), ..ServerConfig::default() };
        let mut h = Harness::new(config);
        h.inject(t(0), "init-info", &RomanoMessage::ConnectionRequest { id: id("00000001") });
        h.inject(t(0), "init-info", &RomanoMessage::ConnectionRequest { id: id("00000002") });
        for s in 1..=5 {
            h.inject(t(s * 1000), "common", &RomanoMessage::Heartbeat { id: id("00000001") });
            h.server.poll(t(s * 1000));
        }
        let left: Vec<RomanoId> = h.server.registry().keys().copied().collect();
        assert_eq!(left, vec![id("00000001")]);
        assert_eq!(h.server.stats().evicted, 1);
    }

    #[test]
    fn no_eviction_by_default() {
        let mut h = Harness::new(ServerConfig::default());
        h.inject(t(0), "init-info", &RomanoMessage::ConnectionRequest { id: id("00000001") });
        h.server.poll(t(3_600_000));
        assert_eq!(h.server.registry().len(), 1);
    }
}
