//! Simulated deployment: brokers, registry servers, robots and bridge endpoints on one event loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ScenarioConfig, SEQ_LEN};
use super::HarnessError;
use crate::bridge::BridgeEndpoint;
use crate::broker::Broker;
use crate::codec::{self, MovementCommand, MovementKind, RomanoId, RomanoMessage, UDP_SEND_GO, UDP_SEND_REQ};
use crate::mqttsn::{self, Packet, PublishHandle, QoS};
use crate::node::{AppMessage, Node, NodeConfig, COMMON_TOPIC};
use crate::robot::{Controller, Dispersal, DispersalAction, DispersalState, Pose, PoseSample};
use crate::server::{RegistryServer, ServerConfig};
use crate::simnet::{EventKind, Latency, LinkModel, NodeId, Sim, SimEvent};
use crate::time::{Duration, SimTime};

const PROBE: &[u8] = b"udp-probe";

/// Where robots sit and which extras the deployment has.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    pub networks: usize,
    pub robots: Vec<RobotSpec>,
    /// Exact topic names relayed between network 0 and network 1.
    pub bridge_topics: Option<Vec<String>>,
    /// Direct radio links between robot pairs, for dispersal probes.
    pub radio_pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct RobotSpec {
    pub network: usize,
    pub start: Pose,
}

impl Layout {
    /// `n` robots on one network, spaced 200 mm apart on the y axis.
    pub fn single(n: usize) -> Layout {
        Layout {
            networks: 1,
            robots: (0..n).map(|i| RobotSpec { network: 0, start: Pose::new(0.0, 200.0 * i as f64, 0.0) }).collect(),
            ..Layout::default()
        }
    }
}

/// A robot-side reception of a sequenced NormalData message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reception {
    pub robot: usize,
    pub seq: u32,
    pub at: SimTime,
}

/// One completed dispersal decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersalRound {
    pub at: SimTime,
    pub robot: usize,
    pub rssi_dbm: f64,
    /// Separation after the step (if any) finished.
    pub distance_mm: f64,
}

pub struct RobotActor {
    pub index: usize,
    pub network: usize,
    pub sim_node: NodeId,
    pub node: Node,
    pub controller: Controller,
    pub dispersal: Option<Dispersal>,
    pub start: Pose,
    /// Application messages not consumed by the harness.
    pub app_log: Vec<AppMessage>,
    last_rssi: f64,
}

struct Network {
    broker: Broker,
    broker_node: NodeId,
    server: RegistryServer,
    server_node: NodeId,
    /// MQTT-SN client id to simulator node, for broker emissions.
    clients: BTreeMap<String, NodeId>,
    names: BTreeMap<NodeId, String>,
}

struct BridgeActor {
    network: usize,
    sim_node: NodeId,
    peer: NodeId,
    endpoint: BridgeEndpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Actor {
    Harness,
    Broker(usize),
    Server(usize),
    Robot(usize),
    Bridge(usize),
}

pub type Action = Box<dyn FnOnce(&mut World) + Send>;

/// Traffic counters for topic-labelled broker emissions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicTraffic {
    pub delivered: u64,
    pub link_dropped: u64,
}

pub struct World {
    cfg: ScenarioConfig,
    sim: Sim,
    rng: ChaCha8Rng,
    harness: NodeId,
    nets: Vec<Network>,
    robots: Vec<RobotActor>,
    bridges: Vec<BridgeActor>,
    actors: BTreeMap<NodeId, Actor>,
    armed: BTreeSet<(NodeId, SimTime)>,
    actions: BTreeMap<u64, Action>,
    next_action: u64,
    sent_at: BTreeMap<u32, SimTime>,
    receptions: Vec<Reception>,
    traffic: BTreeMap<String, TopicTraffic>,
    dispersal_log: Vec<DispersalRound>,
    malformed: u64,
    harness_errors: u64,
}

fn robot_address(network: usize, i: usize) -> String {
    format!("fe80::212:4b00:{:x}:{:x}", 0x100 * (network + 1), i + 1)
}

impl World {
    pub fn new(cfg: ScenarioConfig, layout: Layout) -> Result<World, HarnessError> {
        cfg.validate()?;
        let mut sim = Sim::new(cfg.seed);
        sim.set_tracing(cfg.trace);
        let harness = sim.add_node("harness");
        let mut actors = BTreeMap::new();
        actors.insert(harness, Actor::Harness);

        let mut nets = Vec::new();
        for k in 0..layout.networks.max(1) {
            let broker_node = sim.add_node(format!("broker{k}"));
            let server_id = format!("fe80::212:4b00:{:x}:fffe", 0x100 * (k + 1));
            let server_node = sim.add_node(format!("server{k}"));
            sim.connect(server_node, broker_node, LinkModel::local());
            actors.insert(broker_node, Actor::Broker(k));
            actors.insert(server_node, Actor::Server(k));
            let server_cfg = ServerConfig { heartbeat_tracking: cfg.heartbeat(), ..ServerConfig::default() };
            let mut net = Network {
                broker: Broker::new(cfg.broker),
                broker_node,
                server: RegistryServer::new(&server_id, server_cfg),
                server_node,
                clients: BTreeMap::new(),
                names: BTreeMap::new(),
            };
            net.clients.insert(server_id.clone(), server_node);
            net.names.insert(server_node, server_id);
            nets.push(net);
        }

        let node_cfg = NodeConfig { heartbeat_period: cfg.heartbeat(), ..NodeConfig::default() };
        let mut robots = Vec::new();
        let mut per_net = vec![0usize; nets.len()];
        for (index, spec) in layout.robots.iter().enumerate() {
            let k = spec.network.min(nets.len() - 1);
            let address = robot_address(k, per_net[k]);
            per_net[k] += 1;
            let node = Node::new(&address, node_cfg)?;
            let sim_node = sim.add_node(format!("robot{index}:{}", node.id()));
            sim.connect(sim_node, nets[k].broker_node, cfg.link);
            actors.insert(sim_node, Actor::Robot(index));
            nets[k].clients.insert(address.clone(), sim_node);
            nets[k].names.insert(sim_node, address);
            let controller = Controller::new(node.mailbox().clone(), spec.start, cfg.speed);
            robots.push(RobotActor {
                index,
                network: k,
                sim_node,
                node,
                controller,
                dispersal: None,
                start: spec.start,
                app_log: Vec::new(),
                last_rssi: f64::NAN,
            });
        }
        for &(a, b) in &layout.radio_pairs {
            let (na, nb) = (robots[a].sim_node, robots[b].sim_node);
            sim.connect(na, nb, cfg.link);
            let (ia, ib) = (robots[a].node.id(), robots[b].node.id());
            robots[a].dispersal = Some(Dispersal::new(ia, ib, cfg.dispersal));
            robots[b].dispersal = Some(Dispersal::new(ib, ia, cfg.dispersal));
        }

        let mut bridges = Vec::new();
        if let Some(topics) = &layout.bridge_topics {
            if nets.len() < 2 {
                return Err(HarnessError::ConfigInvalid("a bridge needs two networks".into()));
            }
            let mut ids = Vec::new();
            for (k, net) in nets.iter_mut().enumerate().take(2) {
                let client = format!("fe80::212:4b00:{:x}:fffd", 0x100 * (k + 1));
                let sim_node = sim.add_node(format!("bridge{k}"));
                sim.connect(sim_node, net.broker_node, LinkModel::local());
                net.clients.insert(client.clone(), sim_node);
                net.names.insert(sim_node, client.clone());
                ids.push((client, sim_node));
            }
            let relay = LinkModel::default().with_latency(Latency::fixed(Duration::from_millis(cfg.relay_latency_ms)));
            sim.connect(ids[0].1, ids[1].1, relay);
            for (k, (client, sim_node)) in ids.iter().enumerate() {
                actors.insert(*sim_node, Actor::Bridge(k));
                bridges.push(BridgeActor {
                    network: k,
                    sim_node: *sim_node,
                    peer: ids[1 - k].1,
                    endpoint: BridgeEndpoint::new(client, 0xB0 + k as u8, topics.iter().cloned(), cfg.relay_queue),
                });
            }
        }

        Ok(World {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba5e),
            cfg,
            sim,
            harness,
            nets,
            robots,
            bridges,
            actors,
            armed: BTreeSet::new(),
            actions: BTreeMap::new(),
            next_action: 0,
            sent_at: BTreeMap::new(),
            receptions: Vec::new(),
            traffic: BTreeMap::new(),
            dispersal_log: Vec::new(),
            malformed: 0,
            harness_errors: 0,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Sim {
        &mut self.sim
    }

    pub fn robots(&self) -> &[RobotActor] {
        &self.robots
    }

    pub fn robot(&self, i: usize) -> &RobotActor {
        &self.robots[i]
    }

    pub fn robot_by_id(&self, id: &RomanoId) -> Option<&RobotActor> {
        self.robots.iter().find(|r| r.node.id() == *id)
    }

    pub fn broker(&self, net: usize) -> &Broker {
        &self.nets[net].broker
    }

    pub fn server(&self, net: usize) -> &RegistryServer {
        &self.nets[net].server
    }

    pub fn bridge(&self, k: usize) -> &BridgeEndpoint {
        &self.bridges[k].endpoint
    }

    pub fn network_count(&self) -> usize {
        self.nets.len()
    }

    pub fn bridge_count(&self) -> usize {
        self.bridges.len()
    }

    pub fn receptions(&self) -> &[Reception] {
        &self.receptions
    }

    pub fn sent_at(&self) -> &BTreeMap<u32, SimTime> {
        &self.sent_at
    }

    pub fn traffic(&self, topic: &str) -> TopicTraffic {
        self.traffic.get(topic).copied().unwrap_or_default()
    }

    pub fn dispersal_log(&self) -> &[DispersalRound] {
        &self.dispersal_log
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }

    /// Counts a scripted harness step that could not be carried out.
    pub fn note_harness_error(&mut self) {
        self.harness_errors += 1;
    }

    pub fn harness_errors(&self) -> u64 {
        self.harness_errors
    }

    pub fn sim_node_of_robot(&self, i: usize) -> NodeId {
        self.robots[i].sim_node
    }

    pub fn render_trace(&self) -> String {
        self.sim.render_trace()
    }

    pub fn pose_samples(&self) -> Vec<(usize, PoseSample)> {
        self.robots.iter().flat_map(|r| r.controller.trace().iter().map(move |s| (r.index, *s))).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        let now = self.now();
        self.robots.iter().map(|r| r.controller.pose_at(now)).collect()
    }

    /// Draws from the harness generator (not the radio generator).
    pub fn random_index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n.max(1))
    }

    // ---- scheduling ----

    /// Runs `action` at virtual time `at` on the event loop.
    pub fn schedule(&mut self, at: SimTime, action: impl FnOnce(&mut World) + Send + 'static) {
        let token = self.next_action;
        self.next_action += 1;
        self.actions.insert(token, Box::new(action));
        self.sim.schedule_timer(at, self.harness, token);
    }

    fn arm(&mut self, node: NodeId, at: Option<SimTime>) {
        let Some(at) = at else { return };
        let at = at.max(self.sim.now());
        if self.armed.insert((node, at)) {
            self.sim.schedule_timer(at, node, 0);
        }
    }

    /// Starts servers and bridges now and boots robot `i` at `i * boot_stagger`.
    pub fn start(&mut self) {
        let now = self.now();
        for k in 0..self.nets.len() {
            self.nets[k].server.start(now);
            self.flush_server(k);
        }
        for b in 0..self.bridges.len() {
            self.bridges[b].endpoint.start(now);
            self.flush_bridge(b);
        }
        let stagger = Duration::from_millis(self.cfg.boot_stagger_ms);
        for i in 0..self.robots.len() {
            self.schedule(now + stagger.times(i as u64 + 1), move |w| {
                let now = w.now();
                w.robots[i].node.start(now);
                w.flush_robot(i);
            });
        }
    }

    pub fn all_ready(&self) -> bool {
        self.nets.iter().all(|n| n.server.is_ready())
            && self.robots.iter().all(|r| r.node.is_ready())
            && self.bridges.iter().all(|b| b.endpoint.is_ready())
    }

    /// Runs until every actor is ready, failing after the configured timeout.
    pub fn run_until_ready(&mut self) -> Result<SimTime, HarnessError> {
        let deadline = self.now() + Duration::from_millis(self.cfg.establish_timeout_ms);
        if self.run_until_cond(deadline, World::all_ready) {
            Ok(self.now())
        } else {
            Err(HarnessError::EstablishTimeout(self.cfg.establish_timeout_ms))
        }
    }

    pub fn run_until(&mut self, t_end: SimTime) {
        while let Some(ev) = self.sim.next_event(t_end) {
            self.dispatch(ev);
        }
        self.sim.advance_to(t_end);
    }

    pub fn run_for(&mut self, d: Duration) {
        let end = self.now() + d;
        self.run_until(end);
    }

    /// Processes events until `cond` holds (true) or `t_end` passes (false).
    pub fn run_until_cond(&mut self, t_end: SimTime, cond: impl Fn(&World) -> bool) -> bool {
        if cond(self) {
            return true;
        }
        while let Some(ev) = self.sim.next_event(t_end) {
            self.dispatch(ev);
            if cond(self) {
                return true;
            }
        }
        self.sim.advance_to(t_end);
        cond(self)
    }

    // ---- publishing ----

    /// Publishes from network `net`'s registry server.
    pub fn server_publish(
        &mut self,
        net: usize,
        topic: &str,
        msg: &RomanoMessage,
        qos: QoS,
    ) -> Result<PublishHandle, HarnessError> {
        let now = self.now();
        let h = self.nets[net].server.publish(now, topic, msg, qos)?;
        self.flush_server(net);
        Ok(h)
    }

    pub fn server_register(&mut self, net: usize, topic: &str) -> Result<(), HarnessError> {
        let now = self.now();
        self.nets[net].server.register(now, topic)?;
        self.flush_server(net);
        Ok(())
    }

    /// Publishes sequenced NormalData of `payload` total octets and records the call time.
    pub fn publish_sequenced(&mut self, net: usize, topic: &str, seq: u32) -> Result<(), HarnessError> {
        let body = self.cfg.payload - codec::HEADER_LEN;
        let mut data = vec![0u8; body];
        data[..SEQ_LEN].copy_from_slice(&seq.to_be_bytes());
        self.sent_at.insert(seq, self.now());
        let qos = self.cfg.qos();
        self.server_publish(net, topic, &RomanoMessage::NormalData { data }, qos)?;
        Ok(())
    }

    /// Publishes from robot `i`'s own session.
    pub fn robot_publish(&mut self, i: usize, topic: &str, msg: &RomanoMessage) -> Result<(), HarnessError> {
        let now = self.now();
        self.robots[i].node.publish(now, topic, msg, QoS::AtMostOnce)?;
        self.flush_robot(i);
        Ok(())
    }

    /// Queues a movement on robot `i` directly, as its own application would.
    pub fn robot_execute(&mut self, i: usize, cmd: MovementCommand) {
        self.robots[i].node.mailbox().push(cmd);
        self.flush_robot(i);
    }

    /// Publishes a MovementControl to `target` (a topic or ROMANO id) in network `net`.
    pub fn command(&mut self, net: usize, target: &str, kind: MovementKind, magnitude: u32) -> Result<(), HarnessError> {
        let magnitude = u16::try_from(magnitude).map_err(|_| HarnessError::MagnitudeOutOfRange(magnitude))?;
        let known = target == COMMON_TOPIC
            || self.robots.iter().any(|r| r.network == net && r.node.id().as_str() == target)
            || self.nets[net].broker.topic_id(target).is_some();
        if !known {
            return Err(HarnessError::UnknownTarget(target.to_string()));
        }
        self.server_publish(net, target, &RomanoMessage::movement(kind, magnitude), QoS::AtMostOnce)?;
        Ok(())
    }

    pub fn set_relay_up(&mut self, up: bool) {
        if self.bridges.len() < 2 {
            return;
        }
        let (a, b) = (self.bridges[0].sim_node, self.bridges[1].sim_node);
        self.sim.set_connected(a, b, up);
        for k in 0..2 {
            self.bridges[k].endpoint.set_relay_up(up);
            self.flush_bridge(k);
        }
    }

    /// Picks a random robot of the first radio pair and starts the dispersal handshake there.
    pub fn start_dispersal(&mut self) -> Option<usize> {
        let pair: Vec<usize> = self.robots.iter().filter(|r| r.dispersal.is_some()).map(|r| r.index).collect();
        if pair.is_empty() {
            return None;
        }
        let pick = pair[self.random_index(pair.len())];
        let now = self.now();
        let acts = self.robots[pick].dispersal.as_mut().map(|d| d.initiate(now)).unwrap_or_default();
        self.apply_dispersal(pick, acts);
        self.flush_robot(pick);
        Some(pick)
    }

    // ---- event handling ----

    fn dispatch(&mut self, ev: SimEvent) {
        let now = ev.time;
        match ev.kind {
            EventKind::Timer { node, token } => {
                self.armed.remove(&(node, now));
                match self.actors.get(&node).copied() {
                    Some(Actor::Harness) => {
                        if let Some(action) = self.actions.remove(&token) {
                            action(self);
                        }
                    }
                    Some(Actor::Broker(k)) => self.flush_broker(k),
                    Some(Actor::Server(k)) => {
                        self.nets[k].server.poll(now);
                        self.flush_server(k);
                    }
                    Some(Actor::Robot(i)) => {
                        self.robots[i].node.poll(now);
                        if let Some(d) = self.robots[i].dispersal.as_mut() {
                            let acts = d.poll(now);
                            self.apply_dispersal(i, acts);
                        }
                        self.flush_robot(i);
                    }
                    Some(Actor::Bridge(b)) => {
                        self.bridges[b].endpoint.poll(now);
                        self.flush_bridge(b);
                    }
                    None => {}
                }
            }
            EventKind::Deliver { src, dst, bytes, topic } => {
                let from = self.actors.get(&src).copied();
                if let (Some(Actor::Broker(_)), Some(t)) = (from, &topic) {
                    self.traffic.entry(t.clone()).or_default().delivered += 1;
                }
                match self.actors.get(&dst).copied() {
                    Some(Actor::Robot(i)) if matches!(from, Some(Actor::Robot(_))) => self.on_probe(i, &bytes),
                    Some(Actor::Bridge(b)) if matches!(from, Some(Actor::Bridge(_))) => {
                        self.bridges[b].endpoint.on_relay_frame(now, &bytes);
                        self.flush_bridge(b);
                    }
                    Some(actor) => {
                        let Ok(packet) = mqttsn::decode(&bytes) else {
                            self.malformed += 1;
                            return;
                        };
                        self.on_packet(actor, src, packet);
                    }
                    None => {}
                }
            }
        }
    }

    fn on_packet(&mut self, actor: Actor, src: NodeId, packet: Packet) {
        let now = self.now();
        match actor {
            Actor::Broker(k) => {
                let Some(client) = self.nets[k].names.get(&src).cloned() else { return };
                self.nets[k].broker.handle(now, &client, packet);
                self.flush_broker(k);
            }
            Actor::Server(k) => {
                self.nets[k].server.handle_packet(now, packet);
                self.flush_server(k);
            }
            Actor::Robot(i) => {
                self.robots[i].node.handle_packet(now, packet);
                self.flush_robot(i);
            }
            Actor::Bridge(b) => {
                self.bridges[b].endpoint.handle_packet(now, packet);
                self.flush_bridge(b);
            }
            Actor::Harness => {}
        }
    }

    fn send(&mut self, src: NodeId, dst: NodeId, bytes: Vec<u8>, topic: Option<&str>) {
        match self.sim.send(src, dst, bytes, topic) {
            Ok(Some(_)) => {}
            Ok(None) => {
                if let Some(t) = topic {
                    self.traffic.entry(t.to_string()).or_default().link_dropped += 1;
                }
            }
            // Links are created with their actors, so a missing one is a harness bug.
            Err(e) => panic!("{e}"),
        }
    }

    fn send_packets(&mut self, src: NodeId, net: usize, packets: Vec<Packet>) {
        let broker = self.nets[net].broker_node;
        for p in packets {
            match mqttsn::encode(&p) {
                Ok(bytes) => self.send(src, broker, bytes, None),
                Err(_) => self.malformed += 1,
            }
        }
    }

    fn flush_broker(&mut self, k: usize) {
        let now = self.now();
        while let Some(em) = self.nets[k].broker.drain(now) {
            let Some(dest) = self.nets[k].clients.get(&em.dest).copied() else { continue };
            let Ok(bytes) = mqttsn::encode(&em.packet) else {
                self.malformed += 1;
                continue;
            };
            let from = self.nets[k].broker_node;
            self.send(from, dest, bytes, em.topic.as_deref());
        }
        let next = self.nets[k].broker.next_release();
        self.arm(self.nets[k].broker_node, next);
    }

    fn flush_server(&mut self, k: usize) {
        let packets = self.nets[k].server.take_outbox();
        self.send_packets(self.nets[k].server_node, k, packets);
        let next = self.nets[k].server.next_deadline();
        self.arm(self.nets[k].server_node, next);
    }

    fn flush_bridge(&mut self, b: usize) {
        let net = self.bridges[b].network;
        let packets = self.bridges[b].endpoint.take_outbox();
        self.send_packets(self.bridges[b].sim_node, net, packets);
        let (src, peer) = (self.bridges[b].sim_node, self.bridges[b].peer);
        for frame in self.bridges[b].endpoint.take_relay_frames() {
            self.send(src, peer, frame, None);
        }
        let next = self.bridges[b].endpoint.next_deadline();
        self.arm(src, next);
    }

    fn flush_robot(&mut self, i: usize) {
        let now = self.now();
        loop {
            let packets = self.robots[i].node.take_outbox();
            let apps = self.robots[i].node.take_app_messages();
            let idle = packets.is_empty() && apps.is_empty();
            let net = self.robots[i].network;
            self.send_packets(self.robots[i].sim_node, net, packets);
            for app in apps {
                self.on_app(i, app);
            }
            let next_move = self.robots[i].controller.step(now);
            self.arm(self.robots[i].sim_node, next_move);
            let move_done = self.robots[i].controller.is_idle()
                && self.robots[i].dispersal.as_ref().is_some_and(|d| d.state() == DispersalState::Moving);
            if move_done {
                self.log_round(i);
                let acts = self.robots[i].dispersal.as_mut().map(|d| d.on_move_done(now)).unwrap_or_default();
                self.apply_dispersal(i, acts);
                continue;
            }
            if idle {
                break;
            }
        }
        let r = &self.robots[i];
        let next = [r.node.next_deadline(), r.dispersal.as_ref().and_then(Dispersal::next_deadline)]
            .into_iter()
            .flatten()
            .min();
        self.arm(r.sim_node, next);
    }

    fn on_app(&mut self, i: usize, app: AppMessage) {
        let now = self.now();
        match &app.message {
            RomanoMessage::Custom { code: UDP_SEND_REQ, .. } => {
                let acts = self.robots[i].dispersal.as_mut().map(|d| d.on_request(now)).unwrap_or_default();
                self.apply_dispersal(i, acts);
            }
            RomanoMessage::Custom { code: UDP_SEND_GO, .. } => {
                let acts = self.robots[i].dispersal.as_mut().map(|d| d.on_go(now)).unwrap_or_default();
                self.apply_dispersal(i, acts);
            }
            RomanoMessage::NormalData { data } if data.len() >= SEQ_LEN => {
                let seq = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
                self.receptions.push(Reception { robot: i, seq, at: now });
            }
            _ => self.robots[i].app_log.push(app),
        }
    }

    fn peer_index(&self, i: usize) -> Option<usize> {
        let peer = self.robots[i].dispersal.as_ref()?.peer();
        self.robots.iter().position(|r| r.node.id() == peer)
    }

    fn apply_dispersal(&mut self, i: usize, acts: Vec<DispersalAction>) {
        let now = self.now();
        let Some(peer) = self.peer_index(i) else { return };
        let peer_id = self.robots[peer].node.id();
        for act in acts {
            match act {
                DispersalAction::SendReq | DispersalAction::SendGo => {
                    let code = if act == DispersalAction::SendReq { UDP_SEND_REQ } else { UDP_SEND_GO };
                    let msg = RomanoMessage::Custom { code, data: Vec::new() };
                    let _ = self.robots[i].node.publish(now, peer_id.as_str(), &msg, QoS::AtMostOnce);
                }
                DispersalAction::SendProbe => {
                    let (src, dst) = (self.robots[i].sim_node, self.robots[peer].sim_node);
                    self.send(src, dst, PROBE.to_vec(), None);
                }
                DispersalAction::Move(cmd) => {
                    self.robots[i].node.mailbox().push(cmd);
                }
            }
        }
    }

    fn separation(&self, i: usize) -> Option<f64> {
        let peer = self.peer_index(i)?;
        let now = self.now();
        Some(self.robots[i].controller.pose_at(now).distance_to(&self.robots[peer].controller.pose_at(now)))
    }

    fn log_round(&mut self, i: usize) {
        if let Some(d) = self.separation(i) {
            let rssi = self.robots[i].last_rssi;
            self.dispersal_log.push(DispersalRound { at: self.now(), robot: i, rssi_dbm: rssi, distance_mm: d });
        }
    }

    fn on_probe(&mut self, i: usize, bytes: &[u8]) {
        if bytes != PROBE || self.robots[i].dispersal.is_none() {
            self.malformed += 1;
            return;
        }
        let now = self.now();
        let Some(distance) = self.separation(i) else { return };
        let result = self.robots[i].dispersal.as_mut().map(|d| d.on_probe(now, distance));
        match result {
            Some(Ok(acts)) => {
                if let Some(rssi) = self.robots[i].dispersal.as_ref().and_then(|d| d.stats().last_rssi) {
                    self.robots[i].last_rssi = rssi;
                }
                let stationary = acts.iter().all(|a| !matches!(a, DispersalAction::Move(_)));
                if stationary && !acts.is_empty() {
                    self.log_round(i);
                }
                self.apply_dispersal(i, acts);
            }
            Some(Err(_)) => self.malformed += 1,
            None => {}
        }
        self.flush_robot(i);
    }
}
