//! Kinematic robot model and the movement controller behind the control mailbox.

mod dispersal;
mod rssi;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dispersal::{Dispersal, DispersalAction, DispersalConfig, DispersalState, DispersalStats};
pub use rssi::RssiModel;

use crate::codec::{MovementCommand, MovementKind};
use crate::node::Mailbox;
use crate::time::{Duration, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobotError {
    #[error("unknown movement control type {0:#06x}")]
    UnknownControlType(u16),
    #[error("distance must be positive, got {0} mm")]
    NonpositiveDistance(f64),
}

/// Position in millimetres and heading in degrees, 0 = +x, counterclockwise positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::new(0.0, 0.0, 0.0)
    }
}

fn normalize(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// sin/cos of an angle in degrees, exact at multiples of 90.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let h = normalize(deg);
    if h.fract() == 0.0 && (h as u32).is_multiple_of(90) {
        return match h as u32 {
            0 => (0.0, 1.0),
            90 => (1.0, 0.0),
            180 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    h.to_radians().sin_cos()
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading: normalize(heading) }
    }

    fn translate(self, dist: f64, direction: f64) -> Pose {
        let (s, c) = sin_cos_deg(direction);
        Pose { x: self.x + dist * c, y: self.y + dist * s, heading: self.heading }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Applies a built-in command with the given magnitude.
    fn apply_partial(self, kind: MovementKind, magnitude: f64) -> Pose {
        match kind {
            MovementKind::MoveFront => self.translate(magnitude, self.heading),
            MovementKind::MoveBack => self.translate(-magnitude, self.heading),
            MovementKind::MoveLeft => self.translate(magnitude, self.heading + 90.0),
            MovementKind::MoveRight => self.translate(magnitude, self.heading - 90.0),
            MovementKind::RotateLeft => Pose::new(self.x, self.y, self.heading + magnitude),
            MovementKind::RotateRight => Pose::new(self.x, self.y, self.heading - magnitude),
        }
    }
}

/// Executes one command instantaneously. Left/right are lateral translations.
pub fn apply_command(pose: Pose, cmd: MovementCommand) -> Result<Pose, RobotError> {
    let kind = cmd.kind().ok_or(RobotError::UnknownControlType(cmd.control_type))?;
    Ok(pose.apply_partial(kind, cmd.magnitude as f64))
}

/// Execution speeds; `None` in the controller means instantaneous execution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speed {
    pub mm_per_s: f64,
    pub deg_per_s: f64,
}

impl Speed {
    fn duration(&self, cmd: &MovementCommand, kind: MovementKind) -> Duration {
        let rate = if kind.is_rotation() { self.deg_per_s } else { self.mm_per_s };
        if rate <= 0.0 {
            return Duration::ZERO;
        }
        Duration((cmd.magnitude as f64 / rate * 1e6).round() as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub time_us: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct InProgress {
    cmd: MovementCommand,
    kind: MovementKind,
    start_pose: Pose,
    started: SimTime,
    finishes: SimTime,
}

/// Consumes the control mailbox and moves the robot.
#[derive(Debug)]
pub struct Controller {
    mailbox: Mailbox,
    pose: Pose,
    speed: Option<Speed>,
    current: Option<InProgress>,
    executed: Vec<(SimTime, MovementCommand)>,
    rejected: Vec<MovementCommand>,
    trace: Vec<PoseSample>,
}

impl Controller {
    pub fn new(mailbox: Mailbox, start: Pose, speed: Option<Speed>) -> Self {
        Controller {
            mailbox,
            pose: start,
            speed,
            current: None,
            executed: Vec::new(),
            rejected: Vec::new(),
            trace: vec![PoseSample { time_us: 0, x: start.x, y: start.y, heading: start.heading }],
        }
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    /// Pose at `now`, interpolating a command in progress.
    pub fn pose_at(&self, now: SimTime) -> Pose {
        match &self.current {
            Some(p) if now < p.finishes => {
                let total = (p.finishes - p.started).as_micros() as f64;
                let frac = now.saturating_since(p.started).as_micros() as f64 / total;
                p.start_pose.apply_partial(p.kind, p.cmd.magnitude as f64 * frac)
            }
            _ => self.pose,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.current.is_none() && self.mailbox.is_empty()
    }

    /// Commands completed so far, with completion times.
    pub fn executed(&self) -> &[(SimTime, MovementCommand)] {
        &self.executed
    }

    pub fn executed_commands(&self) -> Vec<MovementCommand> {
        self.executed.iter().map(|(_, c)| *c).collect()
    }

    /// Commands with control types outside the built-in table.
    pub fn rejected(&self) -> &[MovementCommand] {
        &self.rejected
    }

    pub fn trace(&self) -> &[PoseSample] {
        &self.trace
    }

    fn sample(&mut self, now: SimTime) {
        self.trace.push(PoseSample {
            time_us: now.as_micros(),
            x: self.pose.x,
            y: self.pose.y,
            heading: self.pose.heading,
        });
    }

    fn finish(&mut self, p: InProgress) {
        self.pose = p.start_pose.apply_partial(p.kind, p.cmd.magnitude as f64);
        self.executed.push((p.finishes, p.cmd));
        self.sample(p.finishes);
    }

    /// Completes due work and starts queued commands. Returns the next completion time, if any.
    pub fn step(&mut self, now: SimTime) -> Option<SimTime> {
        // A command queued behind one that finished before `now` starts at that finish time.
        let mut cursor = now;
        loop {
            if let Some(p) = self.current {
                if p.finishes > now {
                    return Some(p.finishes);
                }
                self.current = None;
                cursor = p.finishes.max(p.started);
                self.finish(p);
            }
            let cmd = self.mailbox.pop()?;
            let Some(kind) = cmd.kind() else {
                self.rejected.push(cmd);
                continue;
            };
            let dur = self.speed.map(|s| s.duration(&cmd, kind)).unwrap_or(Duration::ZERO);
            let started = cursor;
            self.current = Some(InProgress { cmd, kind, start_pose: self.pose, started, finishes: started + dur });
        }
    }
}
