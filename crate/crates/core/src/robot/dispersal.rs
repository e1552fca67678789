//! Two-robot RSSI dispersal handshake.
//!
//! The requester sends UdpSendReq, the responder answers UdpSendGo, the
//! requester emits a radio probe, and the responder measures the probe's
//! RSSI, moves one step and becomes the next requester.

use serde::{Deserialize, Serialize};

use super::{RobotError, RssiModel};
use crate::codec::{MovementCommand, MovementKind, RomanoId};
use crate::time::{Duration, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersalConfig {
    pub rssi_threshold_dbm: f64,
    pub step_mm: u16,
    /// Request retry interval, also the probe wait before taking over.
    pub interval: Duration,
    pub model: RssiModel,
}

impl Default for DispersalConfig {
    fn default() -> Self {
        DispersalConfig {
            rssi_threshold_dbm: -70.0,
            step_mm: 50,
            interval: Duration::from_millis(200),
            model: RssiModel::default(),
        }
    }
}

impl DispersalConfig {
    /// Separation at which the model yields exactly the threshold.
    pub fn target_distance(&self) -> f64 {
        self.model.distance_for(self.rssi_threshold_dbm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispersalState {
    Idle,
    SentReq,
    AwaitUdp,
    Moving,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispersalAction {
    /// Publish UdpSendReq to the peer's id topic.
    SendReq,
    /// Publish UdpSendGo to the peer's id topic.
    SendGo,
    /// Transmit a probe straight over the radio.
    SendProbe,
    /// Queue a movement in this robot's own mailbox.
    Move(MovementCommand),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DispersalStats {
    pub measurements: u64,
    pub moves_closer: u64,
    pub moves_away: u64,
    pub req_retries: u64,
    pub probe_timeouts: u64,
    pub last_rssi: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Dispersal {
    id: RomanoId,
    peer: RomanoId,
    config: DispersalConfig,
    state: DispersalState,
    deadline: Option<SimTime>,
    stats: DispersalStats,
}

impl Dispersal {
    pub fn new(id: RomanoId, peer: RomanoId, config: DispersalConfig) -> Self {
        Dispersal { id, peer, config, state: DispersalState::Idle, deadline: None, stats: DispersalStats::default() }
    }

    pub fn state(&self) -> DispersalState {
        self.state
    }

    pub fn peer(&self) -> RomanoId {
        self.peer
    }

    pub fn stats(&self) -> DispersalStats {
        self.stats
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        self.deadline
    }

    fn request(&mut self, now: SimTime) -> Vec<DispersalAction> {
        self.state = DispersalState::SentReq;
        self.deadline = Some(now + self.config.interval);
        vec![DispersalAction::SendReq]
    }

    /// Makes this robot the first requester.
    pub fn initiate(&mut self, now: SimTime) -> Vec<DispersalAction> {
        self.request(now)
    }

    pub fn on_request(&mut self, now: SimTime) -> Vec<DispersalAction> {
        let accept = match self.state {
            DispersalState::Idle | DispersalState::AwaitUdp => true,
            // Both sides asked at once: the higher id yields.
            DispersalState::SentReq => self.id > self.peer,
            DispersalState::Moving => false,
        };
        if !accept {
            return Vec::new();
        }
        self.state = DispersalState::AwaitUdp;
        self.deadline = Some(now + self.config.interval);
        vec![DispersalAction::SendGo]
    }

    pub fn on_go(&mut self, _now: SimTime) -> Vec<DispersalAction> {
        if self.state != DispersalState::SentReq {
            return Vec::new();
        }
        self.state = DispersalState::Idle;
        self.deadline = None;
        vec![DispersalAction::SendProbe]
    }

    /// Measures a probe received across `distance_mm` and decides on a step.
    pub fn on_probe(&mut self, now: SimTime, distance_mm: f64) -> Result<Vec<DispersalAction>, RobotError> {
        if self.state != DispersalState::AwaitUdp {
            return Ok(Vec::new());
        }
        let rssi = self.config.model.rssi(distance_mm)?;
        self.stats.measurements += 1;
        self.stats.last_rssi = Some(rssi);
        let th = self.config.rssi_threshold_dbm;
        let step = if rssi > th {
            self.stats.moves_away += 1;
            Some(MovementCommand::new(MovementKind::MoveBack, self.config.step_mm))
        } else if rssi < th {
            self.stats.moves_closer += 1;
            Some(MovementCommand::new(MovementKind::MoveFront, self.config.step_mm))
        } else {
            None
        };
        match step {
            Some(cmd) => {
                self.state = DispersalState::Moving;
                self.deadline = None;
                Ok(vec![DispersalAction::Move(cmd)])
            }
            None => Ok(self.request(now)),
        }
    }

    /// Called once the controller has finished the step; hands the turn over.
    pub fn on_move_done(&mut self, now: SimTime) -> Vec<DispersalAction> {
        if self.state != DispersalState::Moving {
            return Vec::new();
        }
        self.request(now)
    }

    pub fn poll(&mut self, now: SimTime) -> Vec<DispersalAction> {
        match (self.state, self.deadline) {
            (DispersalState::SentReq, Some(d)) if now >= d => {
                self.stats.req_retries += 1;
                self.request(now)
            }
            (DispersalState::AwaitUdp, Some(d)) if now >= d => {
                self.stats.probe_timeouts += 1;
                self.request(now)
            }
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ms: u64) -> SimTime {
        SimTime(ms * 1000)
    }

    fn pair() -> (Dispersal, Dispersal) {
        let a = RomanoId::from_u32(1);
        let b = RomanoId::from_u32(2);
        (
            Dispersal::new(a, b, DispersalConfig::default()),
            Dispersal::new(b, a, DispersalConfig::default()),
        )
    }

    #[test]
    fn one_full_round() {
        let (mut a, mut b) = pair();
        assert_eq!(a.initiate(t(0)), vec![DispersalAction::SendReq]);
        assert_eq!(b.on_request(t(20)), vec![DispersalAction::SendGo]);
        assert_eq!(a.on_go(t(40)), vec![DispersalAction::SendProbe]);
        let acts = b.on_probe(t(50), 500.0).unwrap();
        assert_eq!(acts, vec![DispersalAction::Move(MovementCommand::new(MovementKind::MoveBack, 50))]);
        assert_eq!(b.state(), DispersalState::Moving);
        assert_eq!(b.on_move_done(t(50)), vec![DispersalAction::SendReq]);
        assert_eq!(a.on_request(t(70)), vec![DispersalAction::SendGo]);
    }

    #[test]
    fn far_robots_move_closer() {
        let (_, mut b) = pair();
        b.on_request(t(0));
        let acts = b.on_probe(t(1), 20_000.0).unwrap();
        assert_eq!(acts, vec![DispersalAction::Move(MovementCommand::new(MovementKind::MoveFront, 50))]);
    }

    #[test]
    fn exact_threshold_does_not_move() {
        let (_, mut b) = pair();
        b.on_request(t(0));
        let d = DispersalConfig::default().target_distance();
        assert_eq!(b.on_probe(t(1), d).unwrap(), vec![DispersalAction::SendReq]);
        assert_eq!(b.stats().moves_away + b.stats().moves_closer, 0);
    }

    #[test]
    fn unanswered_requests_repeat_forever() {
        let (mut a, _) = pair();
        a.initiate(t(0));
        let mut sent = 1;
        for i in 1..=50 {
            sent += a.poll(t(i * 200)).len();
        }
        assert_eq!(sent, 51);
        assert_eq!(a.stats().req_retries, 50);
    }

    #[test]
    fn lost_probe_hands_turn_to_responder() {
        let (_, mut b) = pair();
        b.on_request(t(0));
        assert!(b.poll(t(199)).is_empty());
        assert_eq!(b.poll(t(200)), vec![DispersalAction::SendReq]);
        assert_eq!(b.state(), DispersalState::SentReq);
    }

    #[test]
    fn crossing_requests_resolve_by_id() {
        let (mut a, mut b) = pair();
        a.initiate(t(0));
        b.initiate(t(0));
        assert!(a.on_request(t(1)).is_empty());
        assert_eq!(b.on_request(t(1)), vec![DispersalAction::SendGo]);
    }

    #[test]
    fn probe_outside_await_is_ignored() {
        let (mut a, _) = pair();
        assert!(a.on_probe(t(0), 100.0).unwrap().is_empty());
    }
}
