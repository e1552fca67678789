//! Experiment and demo harness over the simulated deployment.

mod config;
mod demos;
mod experiments;
mod output;
mod world;

use thiserror::Error;

pub use config::{parse_latency, DemoKind, ScenarioConfig, SEQ_LEN};
pub use demos::{run_demo, Check, DemoReport, RobotPose};
pub use experiments::{
    linear_fit, run_scalability, run_sweep, run_throughput, ExperimentReport, Fit, RobotDelivery, RunOutput,
    ScalabilityPoint, ScalabilityReport, SweepReport, SweepRow,
};
pub use output::{write_demo, write_experiment, write_scalability, write_sweep, OutputFiles};
pub use world::{DispersalRound, Layout, Reception, RobotActor, RobotSpec, TopicTraffic, World};

use crate::codec::CodecError;
use crate::node::NodeError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("magnitude {0} does not fit the 16-bit control data field")]
    MagnitudeOutOfRange(u32),
    #[error("not every node became ready within {0} ms of virtual time")]
    EstablishTimeout(u64),
    #[error("demo {demo} failed: {}{}", failures.join("; "), trace_path.as_deref().map(|p| format!(" (trace: {p})")).unwrap_or_default())]
    DemoAssertionFailed {
        demo: String,
        failures: Vec<String>,
        trace_path: Option<String>,
    },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("output: {0}")]
    Output(String),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Output(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Output(e.to_string())
    }
}
