//! Delivery-ratio and delay experiments.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::world::{Layout, World};
use super::{HarnessError, ScenarioConfig};
use crate::codec::RomanoId;
use crate::node::COMMON_TOPIC;
use crate::robot::PoseSample;
use crate::time::{Duration, SimTime};

/// How long the harness keeps running after the last publish.
const DRAIN_MARGIN: Duration = Duration::from_secs(10);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotDelivery {
    pub run_robots: usize,
    pub robot: usize,
    pub romano_id: RomanoId,
    /// 1-based position in the broker's subscriber list for "common".
    pub position: usize,
    pub published: u64,
    pub received: u64,
    pub delivery_ratio: Option<f64>,
    pub delay_min_ms: Option<f64>,
    pub delay_mean_ms: Option<f64>,
    pub delay_max_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub robots: usize,
    pub rate_mps: f64,
    pub payload: usize,
    pub published: u64,
    pub per_robot: Vec<RobotDelivery>,
    pub delivery_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    pub copies_expected: u64,
    pub delivered: u64,
    pub link_dropped: u64,
    pub buffer_dropped: u64,
    pub in_flight: u64,
    /// Publishes on "common" up to and including the first one that lost a copy to overflow.
    pub overflow_onset: Option<u64>,
    pub max_buffer_occupancy: usize,
    pub conserved: bool,
    pub harness_errors: u64,
}

/// A report plus the traces of the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput<R> {
    pub report: R,
    pub wire_trace: String,
    pub poses: Vec<(usize, PoseSample)>,
}

fn schedule_stream(w: &mut World, start: SimTime, k: u64, n: u64) {
    if k >= n {
        return;
    }
    let at = start + Duration(w.config().publish_offset_us(k));
    w.schedule(at, move |w| {
        if w.publish_sequenced(0, COMMON_TOPIC, k as u32).is_err() {
            w.note_harness_error();
        }
        schedule_stream(w, start, k + 1, n);
    });
}

fn delivery_run(cfg: &ScenarioConfig) -> Result<(ExperimentReport, World), HarnessError> {
    let mut w = World::new(cfg.clone(), Layout::single(cfg.robots))?;
    w.start();
    w.run_until_ready()?;
    // Register the topic before the stream so the first message carries no REGISTER round trip.
    w.server_register(0, COMMON_TOPIC)?;
    let ready = w.now();
    let start = ready + Duration::from_millis(100);
    schedule_stream(&mut w, start, 0, cfg.messages);
    let last = start + Duration(cfg.publish_offset_us(cfg.messages.saturating_sub(1)));
    w.run_until(last + DRAIN_MARGIN);
    let report = summarize(&w);
    Ok((report, w))
}

fn summarize(w: &World) -> ExperimentReport {
    let cfg = w.config();
    let published = w.sent_at().len() as u64;
    let broker = w.broker(0);
    let subs = broker.subscribers(COMMON_TOPIC);
    let mut per_robot = Vec::new();
    let mut position = 0;
    for client in &subs {
        let Some(r) = w.robots().iter().find(|r| r.node.address() == client) else { continue };
        position += 1;
        let mut seen = BTreeSet::new();
        let mut delays = Vec::new();
        for rec in w.receptions().iter().filter(|x| x.robot == r.index) {
            if seen.insert(rec.seq) {
                if let Some(sent) = w.sent_at().get(&rec.seq) {
                    delays.push(rec.at.saturating_since(*sent).as_millis_f64());
                }
            }
        }
        let received = seen.len() as u64;
        let (min, mean, max) = stats(&delays);
        per_robot.push(RobotDelivery {
            run_robots: cfg.robots,
            robot: r.index,
            romano_id: r.node.id(),
            position,
            published,
            received,
            delivery_ratio: (published > 0).then(|| received as f64 / published as f64),
            delay_min_ms: min,
            delay_mean_ms: mean,
            delay_max_ms: max,
        });
    }
    let ratios: Vec<f64> = per_robot.iter().filter_map(|r| r.delivery_ratio).collect();
    let total_received: u64 = per_robot.iter().map(|r| r.received).sum();
    let denominator = published * per_robot.len() as u64;

    let topic = broker.topic_stats(COMMON_TOPIC).unwrap_or_default();
    let traffic = w.traffic(COMMON_TOPIC);
    let in_flight = broker.buffered_for(COMMON_TOPIC) + w.sim().in_flight_for(COMMON_TOPIC);
    let common_id = broker.topic_id(COMMON_TOPIC);
    let counters = broker.counters();
    let overflow_onset = counters
        .first_drop
        .filter(|d| Some(d.topic_id) == common_id)
        .map(|d| d.topic_publishes);
    ExperimentReport {
        seed: cfg.seed,
        robots: cfg.robots,
        rate_mps: cfg.rate_mps,
        payload: cfg.payload,
        published,
        delivery_ratio: (denominator > 0).then(|| total_received as f64 / denominator as f64),
        min_ratio: ratios.iter().copied().reduce(f64::min),
        max_ratio: ratios.iter().copied().reduce(f64::max),
        per_robot,
        copies_expected: topic.copies_expected,
        delivered: traffic.delivered,
        link_dropped: traffic.link_dropped,
        buffer_dropped: topic.copies_dropped,
        in_flight,
        overflow_onset,
        max_buffer_occupancy: counters.max_occupancy,
        conserved: topic.copies_expected
            == traffic.delivered + traffic.link_dropped + topic.copies_dropped + in_flight,
        harness_errors: w.harness_errors(),
    }
}

fn stats(xs: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None, None);
    }
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (Some(min), Some(mean), Some(max))
}

/// The server publishes `messages` sequenced messages on "common" at `rate_mps`.
pub fn run_throughput(cfg: &ScenarioConfig) -> Result<RunOutput<ExperimentReport>, HarnessError> {
    let (report, w) = delivery_run(cfg)?;
    Ok(RunOutput { report, wire_trace: w.render_trace(), poses: w.pose_samples() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`. Needs two distinct x values.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<Fit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(Fit { slope, intercept, r_squared })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityPoint {
    pub robots: usize,
    pub min_delay_ms: Option<f64>,
    pub max_delay_ms: Option<f64>,
    pub per_robot: Vec<RobotDelivery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityReport {
    pub seed: u64,
    pub rate_mps: f64,
    pub points: Vec<ScalabilityPoint>,
    /// Least-squares fit of maximum delay (ms) against robot count.
    pub fit: Option<Fit>,
}

/// Repeats the broadcast experiment for each robot count in `sweep_robots`.
///
/// The returned traces are those of the last (normally largest) run.
pub fn run_scalability(cfg: &ScenarioConfig) -> Result<RunOutput<ScalabilityReport>, HarnessError> {
    if cfg.sweep_robots.is_empty() {
        return Err(HarnessError::ConfigInvalid("sweep_robots is empty".into()));
    }
    let mut points = Vec::new();
    let mut last = None;
    for &n in &cfg.sweep_robots {
        let run_cfg = ScenarioConfig { robots: n, ..cfg.clone() };
        let (report, w) = delivery_run(&run_cfg)?;
        points.push(ScalabilityPoint {
            robots: n,
            min_delay_ms: report.per_robot.iter().filter_map(|r| r.delay_min_ms).reduce(f64::min),
            max_delay_ms: report.per_robot.iter().filter_map(|r| r.delay_max_ms).reduce(f64::max),
            per_robot: report.per_robot,
        });
        last = Some(w);
    }
    let xy: Vec<(f64, f64)> = points.iter().filter_map(|p| Some((p.robots as f64, p.max_delay_ms?))).collect();
    let w = last.expect("sweep is non-empty");
    Ok(RunOutput {
        report: ScalabilityReport { seed: cfg.seed, rate_mps: cfg.rate_mps, points, fit: linear_fit(&xy) },
        wire_trace: w.render_trace(),
        poses: w.pose_samples(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate_mps: f64,
    pub seed: u64,
    pub delivery_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    pub buffer_dropped: u64,
    pub overflow_onset: Option<u64>,
    pub conserved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Runs the throughput experiment for every rate in `sweep_rates` and every seed in
/// `seed..seed + sweep_seeds`, in parallel. Rows come back in (rate, seed) order.
pub fn run_sweep(cfg: &ScenarioConfig) -> Result<SweepReport, HarnessError> {
    let jobs: Vec<ScenarioConfig> = cfg
        .sweep_rates
        .iter()
        .flat_map(|&rate| {
            (0..cfg.sweep_seeds.max(1)).map(move |s| (rate, s))
        })
        .map(|(rate, s)| ScenarioConfig { rate_mps: rate, seed: cfg.seed + s, trace: false, ..cfg.clone() })
        .collect();
    let results: Vec<Mutex<Option<Result<SweepRow, HarnessError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let row = delivery_run(job).map(|(r, _)| SweepRow {
                    rate_mps: r.rate_mps,
                    seed: r.seed,
                    delivery_ratio: r.delivery_ratio,
                    min_ratio: r.min_ratio,
                    max_ratio: r.max_ratio,
                    buffer_dropped: r.buffer_dropped,
                    overflow_onset: r.overflow_onset,
                    conserved: r.conserved,
                });
                *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(row);
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (1..=10).map(|n| (n as f64, 20.0 + 8.0 * (n - 1) as f64)).collect();
        let f = linear_fit(&pts).unwrap();
        assert!((f.slope - 8.0).abs() < 1e-12);
        assert!((f.intercept - 12.0).abs() < 1e-12);
        assert_eq!(f.r_squared, 1.0);
    }

    #[test]
    fn fit_needs_two_distinct_points() {
        assert!(linear_fit(&[(1.0, 2.0)]).is_none());
        assert!(linear_fit(&[(1.0, 2.0), (1.0, 3.0)]).is_none());
    }

    #[test]
    fn low_rate_is_lossless() {
        let cfg = ScenarioConfig { rate_mps: 1.0, messages: 20, robots: 3, ..ScenarioConfig::default() };
        let out = run_throughput(&cfg).unwrap();
        let r = out.report;
        assert_eq!(r.published, 20);
        assert_eq!(r.delivery_ratio, Some(1.0));
        assert!(r.conserved);
        assert_eq!(r.in_flight, 0);
        assert_eq!(r.overflow_onset, None);
        let positions: Vec<usize> = r.per_robot.iter().map(|p| p.position).collect();
        assert_eq!(positions, vec![1, 2, 3]);
    }

    #[test]
    fn zero_subscribers_is_not_an_error() {
        let cfg = ScenarioConfig { robots: 0, messages: 5, ..ScenarioConfig::default() };
        let r = run_throughput(&cfg).unwrap().report;
        assert!(r.per_robot.is_empty());
        assert_eq!(r.delivery_ratio, None);
        assert!(r.conserved);
    }

    #[test]
    fn lossy_links_still_conserve() {
        let mut cfg = ScenarioConfig { rate_mps: 50.0, messages: 300, robots: 4, ..ScenarioConfig::default() };
        cfg.link.loss_prob = 0.05;
        let r = run_throughput(&cfg).unwrap().report;
        assert!(r.link_dropped > 0);
        assert!(r.conserved, "{r:?}");
    }
}
