//! The `romano` command line: each subcommand calls the service and writes a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use romano_core::api::{CommandRequest, RunRequest, SessionInfo};
use romano_core::codec::MovementKind;
use romano_core::harness::{
    write_demo, write_experiment, write_scalability, write_sweep, DemoKind, HarnessError, ScenarioConfig,
};

use crate::{Client, ClientError};

#[derive(Debug, Parser)]
#[command(name = "romano", version, about = "Run ROMANO experiments and demos through the service")]
pub struct Cli {
    /// Base URL of the romano-server instance.
    #[arg(long, global = true, env = "ROMANO_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Broadcast a message stream on "common" and report delivery ratio and overflow.
    Throughput(RunArgs),
    /// Repeat the broadcast for each robot count and fit maximum delay against it.
    Scalability(RunArgs),
    /// Run an application demo and check its assertions.
    Demo(RunArgs),
    /// Inject one movement command into a running scenario.
    Command(CommandArgs),
    /// Run the throughput experiment over every configured rate and seed.
    Sweep(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Scenario file of `key = value` lines.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub robots: Option<usize>,
    /// Message generation rate in messages per second.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub messages: Option<u64>,
    /// ROMANO message size in octets.
    #[arg(long)]
    pub payload: Option<usize>,
    /// group-control, path-copy, dispersal or bridge.
    #[arg(long)]
    pub demo: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Any other scenario key, as KEY=VALUE. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CommandArgs {
    /// Topic name or ROMANO id.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub movement: MovementKind,
    #[arg(long)]
    pub magnitude: u32,
    #[arg(long, default_value_t = 0)]
    pub network: usize,
    /// Existing session id. Without it a session is created for this command and removed afterwards.
    #[arg(long)]
    pub session: Option<u64>,
    /// Virtual time to run after injecting the command.
    #[arg(long, default_value_t = 1000)]
    pub settle_ms: u64,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("cannot read scenario {path}: {source}")]
    Scenario { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(HarnessError::DemoAssertionFailed { .. }) => 2,
            _ => 1,
        }
    }
}

/// What a successful invocation produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub summary: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub session: Option<SessionInfo>,
}

impl RunArgs {
    /// Builds the request and the local view of the scenario it describes.
    pub fn request(&self, traces: bool) -> Result<(RunRequest, ScenarioConfig), CliError> {
        let scenario = match &self.scenario {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|source| CliError::Scenario { path: p.display().to_string(), source })?,
            ),
            None => None,
        };
        let mut overrides = BTreeMap::new();
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("robots", self.robots.map(|v| v.to_string())),
            ("rate", self.rate.map(|v| v.to_string())),
            ("messages", self.messages.map(|v| v.to_string())),
            ("payload", self.payload.map(|v| v.to_string())),
            ("demo", self.demo.clone()),
        ];
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::ConfigInvalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                overrides.insert(k.to_string(), v);
            }
        }
        let req = RunRequest { scenario, overrides, traces };
        let cfg = req.config()?;
        Ok((req, cfg))
    }

    fn out_dir(&self, cfg: &ScenarioConfig, default: &str) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| Path::new("romano-out").join(default))
    }
}

fn ratio(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub async fn run(cli: Cli) -> Result<Outcome, CliError> {
    let client = Client::new(cli.server);
    match cli.command {
        Command::Throughput(args) => {
            let (req, cfg) = args.request(true)?;
            let out = client.throughput(&req).await?;
            let dir = args.out_dir(&cfg, &format!("throughput-{}mps-seed{}", cfg.rate_mps, cfg.seed));
            write_experiment(&dir, &out)?;
            let r = &out.report;
            let mut summary = vec![format!(
                "{} robots at {} MPS: delivery ratio {} (min {}, max {}), buffer drops {}, overflow onset {}",
                r.robots,
                r.rate_mps,
                ratio(r.delivery_ratio),
                ratio(r.min_ratio),
                ratio(r.max_ratio),
                r.buffer_dropped,
                r.overflow_onset.map(|k| k.to_string()).unwrap_or_else(|| "none".into()),
            )];
            summary.push(format!("wrote {}", dir.display()));
            Ok(Outcome { summary, out_dir: Some(dir), session: None })
        }
        Command::Scalability(args) => {
            let (req, cfg) = args.request(true)?;
            let out = client.scalability(&req).await?;
            let dir = args.out_dir(&cfg, &format!("scalability-seed{}", cfg.seed));
            write_scalability(&dir, &out)?;
            let mut summary: Vec<String> = out
                .report
                .points
                .iter()
                .map(|p| format!("n={:>2}: min {} ms, max {} ms", p.robots, ratio(p.min_delay_ms), ratio(p.max_delay_ms)))
                .collect();
            if let Some(f) = out.report.fit {
                summary.push(format!("max delay = {:.3} + {:.3} * n ms, R^2 {:.6}", f.intercept, f.slope, f.r_squared));
            }
            summary.push(format!("wrote {}", dir.display()));
            Ok(Outcome { summary, out_dir: Some(dir), session: None })
        }
        Command::Demo(args) => {
            let (req, cfg) = args.request(true)?;
            let kind: DemoKind =
                cfg.demo.ok_or_else(|| HarnessError::ConfigInvalid("no demo selected; pass --demo".into()))?;
            let out = client.demo(kind, &req).await?;
            let dir = args.out_dir(&cfg, &format!("demo-{kind}-seed{}", cfg.seed));
            write_demo(&dir, &out)?;
            let r = &out.report;
            if !r.passed {
                return Err(HarnessError::DemoAssertionFailed {
                    demo: kind.to_string(),
                    failures: r.failures(),
                    trace_path: Some(dir.join("wire_trace.log").display().to_string()),
                }
                .into());
            }
            let mut summary: Vec<String> = r.checks.iter().map(|c| format!("ok   {}: {}", c.name, c.detail)).collect();
            summary.push(format!("demo {kind} passed; wrote {}", dir.display()));
            Ok(Outcome { summary, out_dir: Some(dir), session: None })
        }
        Command::Sweep(args) => {
            let (req, cfg) = args.request(false)?;
            let report = client.sweep(&req).await?;
            let dir = args.out_dir(&cfg, &format!("sweep-seed{}", cfg.seed));
            write_sweep(&dir, &report)?;
            let mut summary: Vec<String> = report
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{:>5} MPS seed {}: ratio {}, buffer drops {}, onset {}",
                        r.rate_mps,
                        r.seed,
                        ratio(r.delivery_ratio),
                        r.buffer_dropped,
                        r.overflow_onset.map(|k| k.to_string()).unwrap_or_else(|| "none".into())
                    )
                })
                .collect();
            summary.push(format!("wrote {}", dir.display()));
            Ok(Outcome { summary, out_dir: Some(dir), session: None })
        }
        Command::Command(args) => {
            let (id, ephemeral) = match args.session {
                Some(id) => (id, false),
                None => {
                    let (req, _) = args.run.request(false)?;
                    (client.create_session(&req).await?.id, true)
                }
            };
            let result = inject(&client, id, &args).await;
            if ephemeral {
                let _ = client.delete_session(id).await;
            }
            let info = result?;
            let mut summary = vec![format!("session {id} at t = {} us", info.now_us)];
            summary.extend(info.robots.iter().map(|r| {
                format!(
                    "robot {} ({}): x {:.1} mm, y {:.1} mm, heading {:.1} deg, {} commands",
                    r.robot, r.romano_id, r.pose.x, r.pose.y, r.pose.heading, r.executed
                )
            }));
            Ok(Outcome { summary, out_dir: None, session: Some(info) })
        }
    }
}

async fn inject(client: &Client, id: u64, args: &CommandArgs) -> Result<SessionInfo, CliError> {
    let cmd = CommandRequest {
        target: args.target.clone(),
        movement: args.movement,
        magnitude: args.magnitude,
        network: args.network,
    };
    client.command(id, &cmd).await?;
    Ok(client.advance(id, args.settle_ms).await?)
}
