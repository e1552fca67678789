//! Scenario configuration: `key = value` files plus flag overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::broker::BrokerConfig;
use crate::codec::HEADER_LEN;
use crate::mqttsn::{QoS, MAX_PUBLISH_DATA};
use crate::robot::{DispersalConfig, Speed};
use crate::simnet::{Latency, LinkModel};
use crate::time::Duration;

/// Octets of a NormalData body taken by the sequence number.
pub const SEQ_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    GroupControl,
    PathCopy,
    Dispersal,
    Bridge,
}

impl DemoKind {
    pub const ALL: [DemoKind; 4] = [DemoKind::GroupControl, DemoKind::PathCopy, DemoKind::Dispersal, DemoKind::Bridge];

    pub fn as_str(self) -> &'static str {
        match self {
            DemoKind::GroupControl => "group_control",
            DemoKind::PathCopy => "path_copy",
            DemoKind::Dispersal => "dispersal",
            DemoKind::Bridge => "bridge",
        }
    }
}

impl fmt::Display for DemoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DemoKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        DemoKind::ALL
            .into_iter()
            .find(|d| d.as_str() == norm)
            .ok_or_else(|| HarnessError::ConfigInvalid(format!("unknown demo {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub robots: usize,
    pub seed: u64,
    pub rate_mps: f64,
    pub messages: u64,
    /// Total ROMANO message size of each experiment message, header included.
    pub payload: usize,
    pub qos: u8,
    pub demo: Option<DemoKind>,
    pub out_dir: Option<String>,
    pub link: LinkModel,
    pub broker: BrokerConfig,
    pub heartbeat_ms: Option<u64>,
    /// Robot counts visited by the scalability sweep.
    pub sweep_robots: Vec<usize>,
    /// Rates visited by the throughput sweep.
    pub sweep_rates: Vec<f64>,
    /// Seeds per sweep rate, starting at `seed`.
    pub sweep_seeds: u64,
    pub relay_latency_ms: u64,
    pub relay_queue: usize,
    pub trace: bool,
    /// Virtual-time limit for all robots to become ready.
    pub establish_timeout_ms: u64,
    /// Boot stagger between consecutive robots.
    pub boot_stagger_ms: u64,
    pub speed: Option<Speed>,
    pub dispersal: DispersalConfig,
    pub separation_mm: f64,
    pub dispersal_rounds: u64,
    /// Rounds within which the separation must reach the target band.
    pub dispersal_round_limit: u64,
    /// Total messages in the bridge soak, split evenly between the two networks.
    pub bridge_soak: u64,
    /// Soak publish rate per network.
    pub bridge_soak_rate: f64,
    /// Side of the path-copy square, mm.
    pub path_side_mm: u16,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "default".into(),
            robots: 5,
            seed: 1,
            rate_mps: 20.0,
            messages: 5000,
            payload: 32,
            qos: 0,
            demo: None,
            out_dir: None,
            link: LinkModel::default(),
            broker: BrokerConfig::default(),
            heartbeat_ms: None,
            sweep_robots: (1..=10).collect(),
            sweep_rates: vec![1.0, 10.0, 20.0, 50.0, 75.0, 100.0, 200.0, 300.0, 400.0, 500.0],
            sweep_seeds: 1,
            relay_latency_ms: 50,
            relay_queue: crate::bridge::DEFAULT_QUEUE_BOUND,
            trace: true,
            establish_timeout_ms: 60_000,
            boot_stagger_ms: 100,
            speed: None,
            dispersal: DispersalConfig::default(),
            separation_mm: 300.0,
            dispersal_rounds: 300,
            dispersal_round_limit: 200,
            bridge_soak: 10_000,
            bridge_soak_rate: 50.0,
            path_side_mm: 100,
        }
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.trim().parse().map_err(|_| invalid(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(invalid(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// `"20"` is fixed, `"10-20"` is uniform, both in milliseconds (fractions allowed).
pub fn parse_latency(v: &str) -> Result<Latency, HarnessError> {
    let ms = |s: &str| -> Result<Duration, HarnessError> {
        let f: f64 = num("link_latency_ms", s)?;
        if !f.is_finite() || f < 0.0 {
            return Err(invalid("link_latency_ms must be nonnegative"));
        }
        Ok(Duration((f * 1000.0).round() as u64))
    };
    match v.split_once('-') {
        Some((a, b)) => Ok(Latency::uniform(ms(a)?, ms(b)?)),
        None => Ok(Latency::fixed(ms(v)?)),
    }
}

/// `"1-10"` is an inclusive range, otherwise a comma-separated list.
fn parse_list<T: FromStr + Copy>(key: &str, v: &str) -> Result<Vec<T>, HarnessError>
where
    std::ops::RangeInclusive<T>: Iterator<Item = T>,
{
    if let Some((a, b)) = v.split_once('-') {
        let (a, b): (T, T) = (num(key, a)?, num(key, b)?);
        return Ok((a..=b).collect());
    }
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

impl ScenarioConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<ScenarioConfig, HarnessError> {
        let mut cfg = ScenarioConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one option by its file key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        match key {
            "name" | "scenario" => self.name = v.to_string(),
            "robots" => self.robots = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "rate" | "rate_mps" => self.rate_mps = num(key, v)?,
            "messages" => self.messages = num(key, v)?,
            "payload" => self.payload = num(key, v)?,
            "qos" => self.qos = num(key, v)?,
            "demo" => self.demo = Some(v.parse()?),
            "out_dir" | "out-dir" => self.out_dir = Some(v.to_string()),
            "link_latency_ms" => self.link.latency = parse_latency(v)?,
            "link_loss" => self.link.loss_prob = num(key, v)?,
            "link_hops" => self.link.hops = num(key, v)?,
            "link_ordered" => self.link.ordered = parse_bool(key, v)?,
            "dispatch_gap_ms" | "d_svc_ms" => {
                self.broker.dispatch_gap = Duration((num::<f64>(key, v)? * 1000.0).round() as u64)
            }
            "service_interval_us" => self.broker.service_interval = Duration(num(key, v)?),
            "buffer_capacity" | "b_buf" => self.broker.buffer_capacity = num(key, v)?,
            "heartbeat_ms" => {
                let ms: u64 = num(key, v)?;
                self.heartbeat_ms = (ms > 0).then_some(ms);
            }
            "sweep_robots" => self.sweep_robots = parse_list(key, v)?,
            "sweep_rates" => {
                self.sweep_rates = v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect::<Result<_, _>>()?
            }
            "sweep_seeds" => self.sweep_seeds = num(key, v)?,
            "dispersal_round_limit" => self.dispersal_round_limit = num(key, v)?,
            "bridge_soak" => self.bridge_soak = num(key, v)?,
            "bridge_soak_rate" => self.bridge_soak_rate = num(key, v)?,
            "relay_latency_ms" => self.relay_latency_ms = num(key, v)?,
            "relay_queue" => self.relay_queue = num(key, v)?,
            "trace" => self.trace = parse_bool(key, v)?,
            "establish_timeout_ms" => self.establish_timeout_ms = num(key, v)?,
            "boot_stagger_ms" => self.boot_stagger_ms = num(key, v)?,
            "speed_mm_s" => {
                let s = self.speed.get_or_insert(Speed { mm_per_s: 100.0, deg_per_s: 90.0 });
                s.mm_per_s = num(key, v)?;
            }
            "speed_deg_s" => {
                let s = self.speed.get_or_insert(Speed { mm_per_s: 100.0, deg_per_s: 90.0 });
                s.deg_per_s = num(key, v)?;
            }
            "rssi_threshold" | "rssi_th" => self.dispersal.rssi_threshold_dbm = num(key, v)?,
            "step_mm" | "d_s" => self.dispersal.step_mm = num(key, v)?,
            "probe_interval_ms" => self.dispersal.interval = Duration::from_millis(num(key, v)?),
            "rssi_p0" => self.dispersal.model.p0_dbm = num(key, v)?,
            "rssi_n" => self.dispersal.model.n = num(key, v)?,
            "separation_mm" => self.separation_mm = num(key, v)?,
            "dispersal_rounds" => self.dispersal_rounds = num(key, v)?,
            "path_side_mm" => self.path_side_mm = num(key, v)?,
            _ => return Err(invalid(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn qos(&self) -> QoS {
        if self.qos == 1 {
            QoS::AtLeastOnce
        } else {
            QoS::AtMostOnce
        }
    }

    pub fn heartbeat(&self) -> Option<Duration> {
        self.heartbeat_ms.map(Duration::from_millis)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.payload < HEADER_LEN + SEQ_LEN || self.payload > MAX_PUBLISH_DATA {
            return Err(invalid(format!(
                "payload must be within {}..={} octets, got {}",
                HEADER_LEN + SEQ_LEN,
                MAX_PUBLISH_DATA,
                self.payload
            )));
        }
        if !(self.rate_mps > 0.0 && self.rate_mps.is_finite()) {
            return Err(invalid("rate must be positive"));
        }
        if self.qos > 1 {
            return Err(invalid("qos must be 0 or 1"));
        }
        if !(0.0..=1.0).contains(&self.link.loss_prob) {
            return Err(invalid("link_loss must be within [0, 1]"));
        }
        if self.broker.buffer_capacity == 0 {
            return Err(invalid("buffer_capacity must be positive"));
        }
        if self.robots > 4000 {
            return Err(invalid("at most 4000 robots"));
        }
        if !(self.bridge_soak_rate > 0.0 && self.bridge_soak_rate.is_finite()) {
            return Err(invalid("bridge_soak_rate must be positive"));
        }
        if self.separation_mm.is_nan() || self.separation_mm <= 0.0 {
            return Err(invalid("separation_mm must be positive"));
        }
        Ok(())
    }

    /// Offset of experiment message `k` from the first one, in microseconds.
    pub fn publish_offset_us(&self, k: u64) -> u64 {
        (k as f64 * 1e6 / self.rate_mps).round() as u64
    }
}
