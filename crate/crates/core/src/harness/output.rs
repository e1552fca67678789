//! Writers for the per-run output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::demos::DemoReport;
use super::experiments::{ExperimentReport, RobotDelivery, RunOutput, ScalabilityReport, SweepReport};
use super::HarnessError;
use crate::robot::PoseSample;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const WIRE_TRACE: &str = "wire_trace.log";
pub const POSE_TRACE: &str = "pose_trace.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Paths of the files written for one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputFiles {
    pub files: Vec<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn delivery_rows(w: &mut csv::Writer<fs::File>, rows: &[RobotDelivery]) -> Result<(), HarnessError> {
    for r in rows {
        w.write_record([
            r.run_robots.to_string(),
            r.robot.to_string(),
            r.romano_id.to_string(),
            r.position.to_string(),
            r.published.to_string(),
            r.received.to_string(),
            opt(r.delivery_ratio),
            opt(r.delay_min_ms),
            opt(r.delay_mean_ms),
            opt(r.delay_max_ms),
        ])?;
    }
    Ok(())
}

const DELIVERY_HEADER: [&str; 10] = [
    "run_robots",
    "robot",
    "romano_id",
    "position",
    "published",
    "received",
    "delivery_ratio",
    "delay_min_ms",
    "delay_mean_ms",
    "delay_max_ms",
];

struct Out {
    dir: PathBuf,
    files: OutputFiles,
}

impl Out {
    fn new(dir: &Path) -> Result<Out, HarnessError> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf(), files: OutputFiles::default() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.files.push(p.clone());
        p
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<fs::File>, HarnessError> {
        let p = self.path(name);
        Ok(csv::Writer::from_path(p)?)
    }

    fn json<T: Serialize>(&mut self, value: &T) -> Result<(), HarnessError> {
        let p = self.path(REPORT_JSON);
        let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Output(e.to_string()))?;
        fs::write(p, text + "\n")?;
        Ok(())
    }

    fn traces<R>(&mut self, run: &RunOutput<R>) -> Result<(), HarnessError> {
        let p = self.path(WIRE_TRACE);
        fs::write(p, &run.wire_trace)?;
        let mut w = self.csv(POSE_TRACE)?;
        write_poses(&mut w, &run.poses)?;
        w.flush()?;
        Ok(())
    }
}

fn write_poses(w: &mut csv::Writer<fs::File>, poses: &[(usize, PoseSample)]) -> Result<(), HarnessError> {
    w.write_record(["robot", "time_us", "x_mm", "y_mm", "heading_deg"])?;
    for (robot, s) in poses {
        w.write_record([
            robot.to_string(),
            s.time_us.to_string(),
            format!("{:.6}", s.x),
            format!("{:.6}", s.y),
            format!("{:.6}", s.heading),
        ])?;
    }
    Ok(())
}

pub fn write_experiment(dir: &Path, run: &RunOutput<ExperimentReport>) -> Result<OutputFiles, HarnessError> {
    let mut out = Out::new(dir)?;
    let mut w = out.csv(REPORT_CSV)?;
    w.write_record(DELIVERY_HEADER)?;
    delivery_rows(&mut w, &run.report.per_robot)?;
    w.flush()?;
    out.json(&run.report)?;
    out.traces(run)?;
    Ok(out.files)
}

pub fn write_scalability(dir: &Path, run: &RunOutput<ScalabilityReport>) -> Result<OutputFiles, HarnessError> {
    let mut out = Out::new(dir)?;
    let mut w = out.csv(REPORT_CSV)?;
    w.write_record(DELIVERY_HEADER)?;
    for p in &run.report.points {
        delivery_rows(&mut w, &p.per_robot)?;
    }
    w.flush()?;
    out.json(&run.report)?;
    out.traces(run)?;
    Ok(out.files)
}

pub fn write_demo(dir: &Path, run: &RunOutput<DemoReport>) -> Result<OutputFiles, HarnessError> {
    let mut out = Out::new(dir)?;
    let mut w = out.csv(REPORT_CSV)?;
    w.write_record(["check", "passed", "detail"])?;
    for c in &run.report.checks {
        w.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
    }
    w.flush()?;
    out.json(&run.report)?;
    out.traces(run)?;
    Ok(out.files)
}

pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<OutputFiles, HarnessError> {
    let mut out = Out::new(dir)?;
    let mut w = out.csv(SWEEP_CSV)?;
    w.write_record([
        "rate_mps",
        "seed",
        "delivery_ratio",
        "min_ratio",
        "max_ratio",
        "buffer_dropped",
        "overflow_onset",
        "conserved",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.rate_mps.to_string(),
            r.seed.to_string(),
            opt(r.delivery_ratio),
            opt(r.min_ratio),
            opt(r.max_ratio),
            r.buffer_dropped.to_string(),
            r.overflow_onset.map(|v| v.to_string()).unwrap_or_default(),
            r.conserved.to_string(),
        ])?;
    }
    w.flush()?;
    out.json(report)?;
    Ok(out.files)
}
