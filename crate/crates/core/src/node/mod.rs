//! ROMANO client runtime: establishment, inbound dispatch, heartbeat, control mailbox.

mod mailbox;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mailbox::{Mailbox, DEFAULT_CAPACITY as DEFAULT_MAILBOX_CAPACITY};

use crate::codec::{
    self, CodecError, ExtensionRegistry, MovementCommand, RomanoDataType, RomanoId, RomanoMessage,
};
use crate::mqttsn::{
    ClientSession, Packet, PublishHandle, QoS, RetryPolicy, SessionError, SessionEvent, SessionState,
};
use crate::time::{Duration, SimTime};

pub const INIT_INFO_TOPIC: &str = "init-info";
pub const COMMON_TOPIC: &str = "common";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("node is not ready")]
    NotReady,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    /// How long to wait for a ConnectionAck before re-publishing on init-info.
    pub ack_wait: Duration,
    pub heartbeat_period: Option<Duration>,
    pub mailbox_capacity: usize,
    pub retry: RetryPolicy,
    /// Hold messages for a peer until a fresh heartbeat from it is seen.
    pub heartbeat_gating: bool,
    /// Gating staleness window, in heartbeat periods.
    pub staleness_periods: u32,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            ack_wait: Duration::from_secs(2),
            heartbeat_period: None,
            mailbox_capacity: DEFAULT_MAILBOX_CAPACITY,
            retry: RetryPolicy::default(),
            heartbeat_gating: false,
            staleness_periods: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    AwaitAck,
    Ready,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Idle,
    Connecting,
    SubscribingId,
    /// init-info publish issued; the ack clock starts once it is on the wire.
    Announcing { handle: PublishHandle, deadline: Option<SimTime> },
    SubscribingCommon,
    Ready,
}

/// Milestones recorded for inspection by tests and the harness.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeEvent {
    ConnectAttempt,
    Connected,
    SubscribedId,
    InitInfoSent,
    AckReceived,
    SubscribedCommon,
    Ready,
    HeartbeatSent,
    Disconnected,
    Subscribed(String),
    Unsubscribed(String),
}

/// A ROMANO message handed to the application layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppMessage {
    pub received_at: SimTime,
    pub topic: Option<String>,
    pub message: RomanoMessage,
    /// Octets that followed the ROMANO message inside the MQTT-SN data.
    pub trailer: Vec<u8>,
}

impl AppMessage {
    pub fn data_type(&self) -> RomanoDataType {
        self.message.data_type()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub received: u64,
    pub unknown_type: u64,
    pub malformed: u64,
    pub not_ready: u64,
    pub init_info_sent: u64,
    pub heartbeats_sent: u64,
    pub commands_queued: u64,
    pub gated_queued: u64,
    pub gated_flushed: u64,
}

pub type AppHandler = Box<dyn FnMut(&AppMessage) + Send>;

pub struct Node {
    address: String,
    id: RomanoId,
    config: NodeConfig,
    extensions: ExtensionRegistry,
    session: ClientSession,
    step: Step,
    retry_connect_at: Option<SimTime>,
    next_heartbeat: Option<SimTime>,
    mailbox: Mailbox,
    neighbors: BTreeMap<RomanoId, SimTime>,
    topics: BTreeSet<String>,
    gated: BTreeMap<RomanoId, VecDeque<RomanoMessage>>,
    handlers: HashMap<RomanoDataType, AppHandler>,
    inbox: VecDeque<AppMessage>,
    history: Vec<(SimTime, NodeEvent)>,
    stats: NodeStats,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("address", &self.address)
            .field("id", &self.id)
            .field("phase", &self.phase())
            .finish()
    }
}

impl Node {
    /// Creates a node identified by its IPv6 address.
    pub fn new(address: &str, config: NodeConfig) -> Result<Node, CodecError> {
        let id = RomanoId::derive_from_str(address)?;
        Ok(Node {
            address: address.to_string(),
            id,
            config,
            extensions: ExtensionRegistry::default(),
            session: ClientSession::new(address, config.retry),
            step: Step::Idle,
            retry_connect_at: None,
            next_heartbeat: None,
            mailbox: Mailbox::new(config.mailbox_capacity),
            neighbors: BTreeMap::new(),
            topics: BTreeSet::new(),
            gated: BTreeMap::new(),
            handlers: HashMap::new(),
            inbox: VecDeque::new(),
            history: Vec::new(),
            stats: NodeStats::default(),
        })
    }

    pub fn id(&self) -> RomanoId {
        self.id
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        match self.step {
            Step::Ready => Phase::Ready,
            Step::Announcing { .. } | Step::SubscribingCommon => Phase::AwaitAck,
            Step::Idle | Step::Connecting | Step::SubscribingId => Phase::Init,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.step == Step::Ready
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    pub fn neighbors(&self) -> &BTreeMap<RomanoId, SimTime> {
        &self.neighbors
    }

    /// Topics the node is subscribed to, including its id topic and "common".
    pub fn subscriptions(&self) -> &BTreeSet<String> {
        &self.topics
    }

    pub fn history(&self) -> &[(SimTime, NodeEvent)] {
        &self.history
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    pub fn extensions_mut(&mut self) -> &mut ExtensionRegistry {
        &mut self.extensions
    }

    /// Routes messages of `data_type` to `handler` instead of the inbox.
    pub fn register_handler(&mut self, data_type: RomanoDataType, handler: AppHandler) {
        if let RomanoDataType::Custom(code) = data_type {
            // Built-in codes are never Custom, so this cannot collide.
            let _ = self.extensions.register(code);
        }
        self.handlers.insert(data_type, handler);
    }

    pub fn take_app_messages(&mut self) -> Vec<AppMessage> {
        self.inbox.drain(..).collect()
    }

    fn log(&mut self, now: SimTime, ev: NodeEvent) {
        self.history.push((now, ev));
    }

    /// Begins the establishment phase.
    pub fn start(&mut self, now: SimTime) {
        if self.step == Step::Idle {
            self.try_connect(now);
        }
    }

    fn try_connect(&mut self, now: SimTime) {
        self.retry_connect_at = None;
        if self.session.connect(now).is_ok() {
            self.step = Step::Connecting;
            self.log(now, NodeEvent::ConnectAttempt);
        }
    }

    pub fn handle_packet(&mut self, now: SimTime, packet: Packet) {
        self.session.handle(now, packet);
        self.process_session_events(now);
    }

    pub fn poll(&mut self, now: SimTime) {
        self.session.poll(now);
        self.process_session_events(now);

        if self.retry_connect_at.is_some_and(|t| t <= now) {
            self.try_connect(now);
        }
        if let Step::Announcing { deadline: Some(deadline), .. } = self.step {
            if now >= deadline {
                self.announce(now);
            }
        }
        self.heartbeat_tick(now);
        self.process_session_events(now);
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        let ack = match self.step {
            Step::Announcing { deadline, .. } => deadline,
            _ => None,
        };
        [self.session.next_deadline(), self.retry_connect_at, ack, self.next_heartbeat]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn take_outbox(&mut self) -> Vec<Packet> {
        self.session.take_outbox()
    }

    /// Publishes a ROMANO message on `topic`.
    pub fn publish(
        &mut self,
        now: SimTime,
        topic: &str,
        msg: &RomanoMessage,
        qos: QoS,
    ) -> Result<PublishHandle, NodeError> {
        let bytes = codec::encode(msg)?;
        self.publish_raw(now, topic, bytes, qos)
    }

    pub fn publish_raw(
        &mut self,
        now: SimTime,
        topic: &str,
        data: Vec<u8>,
        qos: QoS,
    ) -> Result<PublishHandle, NodeError> {
        Ok(self.session.publish(now, topic, data, qos)?)
    }

    /// Sends to `dest`'s id topic, holding the message while `dest` has no fresh heartbeat.
    pub fn send_gated(
        &mut self,
        now: SimTime,
        dest: RomanoId,
        msg: RomanoMessage,
    ) -> Result<Option<PublishHandle>, NodeError> {
        if !self.is_ready() {
            return Err(NodeError::NotReady);
        }
        let fresh = match (self.config.heartbeat_gating, self.config.heartbeat_period) {
            (true, Some(period)) => self
                .neighbors
                .get(&dest)
                .is_some_and(|seen| now.saturating_since(*seen) <= period.times(self.config.staleness_periods as u64)),
            _ => true,
        };
        if fresh {
            return self.publish(now, dest.as_str(), &msg, QoS::AtMostOnce).map(Some);
        }
        self.stats.gated_queued += 1;
        self.gated.entry(dest).or_default().push_back(msg);
        Ok(None)
    }

    pub fn gated_backlog(&self, dest: &RomanoId) -> usize {
        self.gated.get(dest).map(VecDeque::len).unwrap_or(0)
    }

    fn heartbeat_tick(&mut self, now: SimTime) {
        let Some(period) = self.config.heartbeat_period else { return };
        if self.step != Step::Ready {
            return;
        }
        while let Some(due) = self.next_heartbeat.filter(|t| *t <= now) {
            let hb = RomanoMessage::Heartbeat { id: self.id };
            if self.publish(now, COMMON_TOPIC, &hb, QoS::AtMostOnce).is_ok() {
                self.stats.heartbeats_sent += 1;
                self.log(now, NodeEvent::HeartbeatSent);
            }
            self.next_heartbeat = Some(due + period);
        }
    }

    fn announce(&mut self, now: SimTime) {
        let req = RomanoMessage::ConnectionRequest { id: self.id };
        match self.publish(now, INIT_INFO_TOPIC, &req, QoS::AtMostOnce) {
            Ok(handle) => self.step = Step::Announcing { handle, deadline: None },
            Err(_) => {
                // Session fell over underneath us; wait out one ack period and try again.
                if let Step::Announcing { handle, .. } = self.step {
                    self.step = Step::Announcing { handle, deadline: Some(now + self.config.ack_wait) };
                }
            }
        }
    }

    fn process_session_events(&mut self, now: SimTime) {
        while let Some(ev) = self.session.poll_event() {
            self.on_session_event(now, ev);
        }
    }

    fn on_session_event(&mut self, now: SimTime, ev: SessionEvent) {
        match ev {
            SessionEvent::Connected => {
                self.log(now, NodeEvent::Connected);
                self.step = Step::SubscribingId;
                let _ = self.session.subscribe(now, self.id.as_str());
            }
            SessionEvent::ConnectTimeout | SessionEvent::ConnectRejected(_) => {
                self.step = Step::Idle;
                if matches!(ev, SessionEvent::ConnectTimeout) {
                    self.try_connect(now);
                } else {
                    self.retry_connect_at = Some(now + self.config.ack_wait);
                }
            }
            SessionEvent::Subscribed { topic, .. } => {
                self.topics.insert(topic.clone());
                if topic == self.id.as_str() && self.step == Step::SubscribingId {
                    self.log(now, NodeEvent::SubscribedId);
                    self.step = Step::Announcing { handle: PublishHandle(0), deadline: None };
                    self.announce(now);
                } else if topic == COMMON_TOPIC && self.step == Step::SubscribingCommon {
                    self.log(now, NodeEvent::SubscribedCommon);
                    self.step = Step::Ready;
                    self.log(now, NodeEvent::Ready);
                    self.next_heartbeat = self.config.heartbeat_period.map(|p| now + p);
                } else {
                    self.log(now, NodeEvent::Subscribed(topic));
                }
            }
            SessionEvent::Unsubscribed { topic } => {
                self.topics.remove(&topic);
                self.log(now, NodeEvent::Unsubscribed(topic));
            }
            SessionEvent::Timeout { request: "SUBSCRIBE", topic } => {
                let establishing = (topic == self.id.as_str() && self.step == Step::SubscribingId)
                    || (topic == COMMON_TOPIC && self.step == Step::SubscribingCommon);
                if establishing {
                    let _ = self.session.subscribe(now, &topic);
                }
            }
            SessionEvent::PublishSent { handle, .. } => {
                if let Step::Announcing { handle: h, deadline: None } = self.step {
                    if h == handle {
                        self.stats.init_info_sent += 1;
                        self.log(now, NodeEvent::InitInfoSent);
                        self.step = Step::Announcing { handle, deadline: Some(now + self.config.ack_wait) };
                    }
                }
            }
            SessionEvent::PublishRejected { handle, .. } => {
                if let Step::Announcing { handle: h, deadline: None } = self.step {
                    if h == handle {
                        self.step = Step::Announcing { handle, deadline: Some(now + self.config.ack_wait) };
                    }
                }
            }
            SessionEvent::Message { topic, data, .. } => self.on_data(now, topic, &data),
            SessionEvent::Disconnected => {
                self.log(now, NodeEvent::Disconnected);
                self.topics.clear();
                self.next_heartbeat = None;
                self.step = Step::Idle;
                self.try_connect(now);
            }
            SessionEvent::Registered { .. }
            | SessionEvent::Timeout { .. }
            | SessionEvent::Rejected { .. }
            | SessionEvent::PublishAcked { .. }
            | SessionEvent::RetriesExhausted { .. } => {}
        }
        if self.session.state() == SessionState::Disconnected
            && !matches!(self.step, Step::Idle | Step::Connecting)
            && self.retry_connect_at.is_none()
        {
            self.step = Step::Idle;
            self.try_connect(now);
        }
    }

    fn on_data(&mut self, now: SimTime, topic: Option<String>, data: &[u8]) {
        self.stats.received += 1;
        let Some((frame, trailer)) = codec::split_frame(data) else {
            self.stats.malformed += 1;
            return;
        };
        let msg = match codec::decode_with(frame, &self.extensions) {
            Ok(m) => m,
            Err(CodecError::UnknownType(_)) => {
                self.stats.unknown_type += 1;
                return;
            }
            Err(_) => {
                self.stats.malformed += 1;
                return;
            }
        };
        if let RomanoMessage::ConnectionAck = msg {
            if topic.as_deref() == Some(self.id.as_str()) {
                if let Step::Announcing { .. } = self.step {
                    self.log(now, NodeEvent::AckReceived);
                    self.step = Step::SubscribingCommon;
                    let _ = self.session.subscribe(now, COMMON_TOPIC);
                }
            }
            return;
        }
        if self.step != Step::Ready {
            self.stats.not_ready += 1;
            return;
        }
        self.dispatch(now, topic, msg, trailer.to_vec());
    }

    /// Acts on a ROMANO message; the arrival topic only labels the application record.
    fn dispatch(&mut self, now: SimTime, topic: Option<String>, msg: RomanoMessage, trailer: Vec<u8>) {
        match &msg {
            RomanoMessage::MqttSubscribe { topic: t } => {
                if !self.topics.contains(t) {
                    let _ = self.session.subscribe(now, t);
                }
            }
            RomanoMessage::MqttUnsubscribe { topic: t } => {
                let _ = self.session.unsubscribe(now, t);
            }
            RomanoMessage::MqttPublishRequest { topic: t, data } => {
                let _ = self.session.publish(now, t.as_str(), data.clone(), QoS::AtMostOnce);
            }
            RomanoMessage::MovementControl { .. } => {
                if let Some(cmd) = MovementCommand::from_message(&msg) {
                    self.stats.commands_queued += 1;
                    self.mailbox.push(cmd);
                } else {
                    self.deliver(AppMessage { received_at: now, topic, message: msg, trailer });
                }
            }
            RomanoMessage::Heartbeat { id } => {
                if *id != self.id {
                    self.neighbors.insert(*id, now);
                    self.flush_gated(now, *id);
                }
            }
            RomanoMessage::ConnectedNodesInfo { ids } => {
                for id in ids.iter().filter(|id| **id != self.id) {
                    self.neighbors.entry(*id).or_insert(now);
                }
                self.deliver(AppMessage { received_at: now, topic, message: msg, trailer });
            }
            RomanoMessage::ConnectionAck => {}
            RomanoMessage::ConnectionRequest { .. }
            | RomanoMessage::RequestConnectedNodesInfo { .. }
            | RomanoMessage::NormalData { .. }
            | RomanoMessage::SensorData { .. }
            | RomanoMessage::Custom { .. } => {
                self.deliver(AppMessage { received_at: now, topic, message: msg, trailer })
            }
        }
    }

    fn deliver(&mut self, app: AppMessage) {
        match self.handlers.get_mut(&app.data_type()) {
            Some(h) => h(&app),
            None => self.inbox.push_back(app),
        }
    }

    fn flush_gated(&mut self, now: SimTime, dest: RomanoId) {
        let Some(queue) = self.gated.remove(&dest) else { return };
        for msg in queue {
            if self.publish(now, dest.as_str(), &msg, QoS::AtMostOnce).is_ok() {
                self.stats.gated_flushed += 1;
            }
        }
    }
}
