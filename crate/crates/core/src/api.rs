//! Request and response bodies shared by the HTTP service and its client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{MovementKind, RomanoId, RomanoMessage};
use crate::harness::{HarnessError, ScenarioConfig};
use crate::robot::Pose;

/// A scenario: optional `key = value` text plus per-key overrides applied after it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunRequest {
    pub scenario: Option<String>,
    pub overrides: BTreeMap<String, String>,
    /// Include wire and pose traces in the response.
    pub traces: bool,
}

impl RunRequest {
    pub fn config(&self) -> Result<ScenarioConfig, HarnessError> {
        let mut cfg = match &self.scenario {
            Some(text) => ScenarioConfig::parse(text)?,
            None => ScenarioConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        if !self.traces {
            cfg.trace = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub message: RomanoMessage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub hex: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub hex: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub message: RomanoMessage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdResponse {
    pub address: String,
    pub romano_id: RomanoId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub robot: usize,
    pub network: usize,
    pub romano_id: RomanoId,
    pub ready: bool,
    pub pose: Pose,
    pub executed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub now_us: u64,
    pub robots: Vec<RobotState>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRequest {
    /// A topic name such as "common", or a robot's ROMANO id.
    pub target: String,
    pub movement: MovementKind,
    pub magnitude: u32,
    #[serde(default)]
    pub network: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl ErrorBody {
    pub fn from_harness(e: &HarnessError) -> ErrorBody {
        let kind = match e {
            HarnessError::ConfigInvalid(_) => "config_invalid",
            HarnessError::UnknownTarget(_) => "unknown_target",
            HarnessError::MagnitudeOutOfRange(_) => "magnitude_out_of_range",
            HarnessError::EstablishTimeout(_) => "establish_timeout",
            HarnessError::DemoAssertionFailed { .. } => "demo_assertion_failed",
            HarnessError::Node(_) => "node",
            HarnessError::Codec(_) => "codec",
            HarnessError::Output(_) => "output",
        };
        ErrorBody { error: kind.to_string(), message: e.to_string() }
    }
}
