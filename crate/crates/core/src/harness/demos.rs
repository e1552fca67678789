//! The four application scenarios, each with its own pass/fail checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::experiments::RunOutput;
use super::world::{Layout, RobotSpec, World};
use super::{DemoKind, HarnessError, ScenarioConfig};
use crate::codec::{MovementCommand, MovementKind, RomanoId, RomanoMessage};
use crate::mqttsn::QoS;
use crate::node::COMMON_TOPIC;
use crate::robot::Pose;
use crate::time::{Duration, SimTime};

pub const TELEMETRY_TOPIC: &str = "telemetry";
const POSE_TOLERANCE_MM: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub robot: usize,
    pub network: usize,
    pub romano_id: RomanoId,
    pub start: Pose,
    pub pose: Pose,
    pub executed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub demo: DemoKind,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub robots: Vec<RobotPose>,
    /// Scenario-specific numbers, such as the dispersal target distance.
    pub metrics: BTreeMap<String, f64>,
}

impl DemoReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Checks(Vec<Check>);

impl Checks {
    fn add(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(Check { name: name.to_string(), passed, detail: detail.into() });
    }
}

fn near(a: Pose, b: Pose) -> bool {
    let dh = (a.heading - b.heading).abs();
    (a.x - b.x).abs() <= POSE_TOLERANCE_MM
        && (a.y - b.y).abs() <= POSE_TOLERANCE_MM
        && (dh <= 1e-9 || (360.0 - dh) <= 1e-9)
}

fn fmt_pose(p: Pose) -> String {
    format!("({:.3}, {:.3}, {:.1} deg)", p.x, p.y, p.heading)
}

fn settle(cfg: &ScenarioConfig) -> Duration {
    // Leave time for slow execution when a speed is configured.
    match cfg.speed {
        Some(_) => Duration::from_secs(5),
        None => Duration::from_secs(1),
    }
}

/// Runs one demo. The report is returned even when checks fail; see [`DemoReport::passed`].
pub fn run_demo(cfg: &ScenarioConfig, demo: DemoKind) -> Result<RunOutput<DemoReport>, HarnessError> {
    let (mut checks, metrics, w) = match demo {
        DemoKind::GroupControl => group_control(cfg)?,
        DemoKind::PathCopy => path_copy(cfg)?,
        DemoKind::Dispersal => dispersal(cfg)?,
        DemoKind::Bridge => bridge(cfg)?,
    };
    checks.add("no_harness_errors", w.harness_errors() == 0, format!("{} harness errors", w.harness_errors()));
    let robots = w
        .robots()
        .iter()
        .map(|r| RobotPose {
            robot: r.index,
            network: r.network,
            romano_id: r.node.id(),
            start: r.start,
            pose: r.controller.pose_at(w.now()),
            executed: r.controller.executed().len(),
        })
        .collect();
    let passed = checks.0.iter().all(|c| c.passed);
    Ok(RunOutput {
        report: DemoReport { demo, seed: cfg.seed, passed, checks: checks.0, robots, metrics },
        wire_trace: w.render_trace(),
        poses: w.pose_samples(),
    })
}

type DemoResult = Result<(Checks, BTreeMap<String, f64>, World), HarnessError>;

fn instruct_subscribe(w: &mut World, net: usize, robot: usize, topic: &str) -> Result<(), HarnessError> {
    let id = w.robot(robot).node.id();
    w.server_publish(net, id.as_str(), &RomanoMessage::MqttSubscribe { topic: topic.to_string() }, QoS::AtMostOnce)?;
    Ok(())
}

fn group_control(cfg: &ScenarioConfig) -> DemoResult {
    let n = cfg.robots.max(2);
    let mut w = World::new(cfg.clone(), Layout::single(n))?;
    let mut c = Checks(Vec::new());
    w.start();
    w.run_until_ready()?;
    let settle = settle(cfg);

    // Broadcast on "common".
    w.command(0, COMMON_TOPIC, MovementKind::MoveFront, 100)?;
    w.run_for(settle);
    let moved: Vec<bool> = w
        .robots()
        .iter()
        .map(|r| near(r.controller.pose(), Pose::new(r.start.x + 100.0, r.start.y, r.start.heading)))
        .collect();
    c.add("broadcast_moves_all", moved.iter().all(|m| *m), format!("{moved:?}"));
    let after_broadcast: Vec<Pose> = w.poses();

    // One robot through its own id topic.
    let target = w.robot(0).node.id();
    w.command(0, target.as_str(), MovementKind::RotateLeft, 90)?;
    w.run_for(settle);
    let poses = w.poses();
    let only_target = poses[0].heading == 90.0 && (1..n).all(|i| poses[i] == after_broadcast[i]);
    c.add("id_topic_moves_only_target", only_target, format!("target {} -> {}", target, fmt_pose(poses[0])));

    // A subgroup built at run time with MqttSubscribe instructions.
    let group: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
    for &i in &group {
        instruct_subscribe(&mut w, 0, i, "group-a")?;
    }
    w.run_for(Duration::from_secs(1));
    let before = w.poses();
    w.command(0, "group-a", MovementKind::MoveLeft, 50)?;
    w.run_for(settle);
    let after = w.poses();
    let ok = (0..n).all(|i| {
        let expect_move = group.contains(&i);
        let moved = before[i] != after[i];
        moved == expect_move
    });
    c.add("subgroup_moves_only_members", ok, format!("members {group:?}"));

    let unknown = w.command(0, "no-such-topic", MovementKind::MoveFront, 1);
    c.add(
        "unknown_target_rejected",
        matches!(unknown, Err(HarnessError::UnknownTarget(_))),
        format!("{unknown:?}"),
    );
    let big = w.command(0, COMMON_TOPIC, MovementKind::MoveFront, 70_000);
    c.add(
        "oversize_magnitude_rejected",
        matches!(big, Err(HarnessError::MagnitudeOutOfRange(70_000))),
        format!("{big:?}"),
    );
    Ok((c, BTreeMap::new(), w))
}

/// The leader's script: a closed square.
pub fn square_path(side: u16) -> Vec<MovementCommand> {
    (0..4)
        .flat_map(|_| [MovementCommand::new(MovementKind::MoveFront, side), MovementCommand::new(MovementKind::RotateLeft, 90)])
        .collect()
}

fn path_copy(cfg: &ScenarioConfig) -> DemoResult {
    let n = cfg.robots.max(2);
    let mut w = World::new(cfg.clone(), Layout::single(n))?;
    let mut c = Checks(Vec::new());
    w.start();
    w.run_until_ready()?;
    for i in 1..n {
        instruct_subscribe(&mut w, 0, i, TELEMETRY_TOPIC)?;
    }
    w.run_for(Duration::from_secs(1));

    let script = square_path(cfg.path_side_mm);
    let step = match cfg.speed {
        Some(s) => Duration::from_millis((cfg.path_side_mm as f64 / s.mm_per_s * 1000.0).max(90.0 / s.deg_per_s * 1000.0) as u64 + 500),
        None => Duration::from_millis(500),
    };
    let t0 = w.now();
    for (k, cmd) in script.iter().copied().enumerate() {
        w.schedule(t0 + step.times(k as u64), move |w| {
            w.robot_execute(0, cmd);
            if w.robot_publish(0, TELEMETRY_TOPIC, &cmd.to_message()).is_err() {
                w.note_harness_error();
            }
        });
    }
    w.run_until(t0 + step.times(script.len() as u64) + settle(cfg) + Duration::from_secs(1));

    let leader = w.robot(0).controller.executed_commands();
    c.add("leader_ran_script", leader == script, format!("{} of {} commands", leader.len(), script.len()));
    let mut traces = BTreeSet::new();
    for i in 1..n {
        let got = w.robot(i).controller.executed_commands();
        traces.insert(format!("{got:?}"));
        c.add(&format!("follower{i}_sequence"), got == leader, format!("{} commands", got.len()));
    }
    c.add("follower_traces_identical", traces.len() <= 1, format!("{} distinct traces", traces.len()));
    for r in w.robots() {
        let p = r.controller.pose();
        c.add(
            &format!("robot{}_closed_path", r.index),
            near(p, r.start),
            format!("start {} end {}", fmt_pose(r.start), fmt_pose(p)),
        );
    }
    Ok((c, BTreeMap::new(), w))
}

fn dispersal(cfg: &ScenarioConfig) -> DemoResult {
    let layout = Layout {
        networks: 1,
        robots: vec![
            RobotSpec { network: 0, start: Pose::new(0.0, 0.0, 0.0) },
            RobotSpec { network: 0, start: Pose::new(cfg.separation_mm, 0.0, 180.0) },
        ],
        radio_pairs: vec![(0, 1)],
        ..Layout::default()
    };
    let mut w = World::new(cfg.clone(), layout)?;
    let mut c = Checks(Vec::new());
    w.start();
    w.run_until_ready()?;
    let initiator = w.start_dispersal();
    let rounds = cfg.dispersal_rounds as usize;
    // A round needs a few network hops; allow a generous bound.
    let limit = w.now() + Duration::from_secs(2).times(cfg.dispersal_rounds.max(1));
    w.run_until_cond(limit, |w| w.dispersal_log().len() >= rounds);

    let target = cfg.dispersal.target_distance();
    let step = cfg.dispersal.step_mm as f64;
    let (lo, hi) = (target - step, target + step);
    let log = w.dispersal_log();
    let distances: Vec<f64> = std::iter::once(cfg.separation_mm).chain(log.iter().map(|r| r.distance_mm)).collect();
    let entered = distances.iter().position(|d| (lo..=hi).contains(d));
    let stays = entered.is_some_and(|k| distances[k..].iter().all(|d| (lo..=hi).contains(d)));
    let max_step = distances.windows(2).map(|p| (p[1] - p[0]).abs()).fold(0.0, f64::max);

    c.add("rounds_completed", log.len() >= rounds, format!("{} of {rounds} rounds", log.len()));
    c.add(
        "enters_band",
        entered.is_some_and(|k| k as u64 <= cfg.dispersal_round_limit),
        format!("band [{lo:.1}, {hi:.1}] mm entered at round {entered:?}, limit {}", cfg.dispersal_round_limit),
    );
    c.add("stays_in_band", stays, format!("final separation {:.1} mm", distances.last().copied().unwrap_or(f64::NAN)));
    c.add("step_bounded", max_step <= step + 1e-9, format!("largest change {max_step:.3} mm"));

    let mut m = BTreeMap::new();
    m.insert("target_distance_mm".into(), target);
    m.insert("initial_distance_mm".into(), cfg.separation_mm);
    if let Some(&d) = distances.last() {
        m.insert("final_distance_mm".into(), d);
    }
    m.insert("rounds".into(), log.len() as f64);
    // Absent metrics are left out: JSON has no NaN.
    if let Some(k) = entered {
        m.insert("entered_round".into(), k as f64);
    }
    if let Some(i) = initiator {
        m.insert("initiator".into(), i as f64);
    }
    Ok((c, m, w))
}

pub const BRIDGED_TOPICS: [&str; 2] = ["group-x", "soak"];

fn bridge(cfg: &ScenarioConfig) -> DemoResult {
    const PER_NET: usize = 3;
    let robots = (0..2 * PER_NET)
        .map(|i| RobotSpec { network: i / PER_NET, start: Pose::new(0.0, 200.0 * (i % PER_NET) as f64, 0.0) })
        .collect();
    let layout = Layout {
        networks: 2,
        robots,
        bridge_topics: Some(BRIDGED_TOPICS.iter().map(|s| s.to_string()).collect()),
        ..Layout::default()
    };
    let mut w = World::new(cfg.clone(), layout)?;
    let mut c = Checks(Vec::new());
    w.start();
    w.run_until_ready()?;
    let settle = settle(cfg);
    // Robots 0..3 live in network A (0), robots 3..6 in network B (1).
    let (a, b) = (0usize, 1usize);

    // Group membership: A0 and B0, B1 on the bridged topic; A1 and B2 on a local-only topic.
    instruct_subscribe(&mut w, a, 0, "group-x")?;
    instruct_subscribe(&mut w, b, 3, "group-x")?;
    instruct_subscribe(&mut w, b, 4, "group-x")?;
    instruct_subscribe(&mut w, a, 1, "local-only")?;
    instruct_subscribe(&mut w, b, 5, "local-only")?;
    for i in 0..2 * PER_NET {
        let net = w.robot(i).network;
        instruct_subscribe(&mut w, net, i, "soak")?;
    }
    w.run_for(Duration::from_secs(2));

    let before = w.poses();
    w.command(a, "group-x", MovementKind::MoveFront, 100)?;
    w.run_for(settle);
    let after = w.poses();
    let moved: Vec<usize> = (0..2 * PER_NET).filter(|&i| before[i] != after[i]).collect();
    c.add("bridged_command_moves_subscribers", moved == vec![0, 3, 4], format!("moved {moved:?}, expected [0, 3, 4]"));
    let exact = [3, 4].iter().all(|&i| (after[i].x - before[i].x - 100.0).abs() <= POSE_TOLERANCE_MM);
    c.add("remote_step_exact", exact, "remote members advanced 100 mm");

    let before = w.poses();
    w.command(a, "local-only", MovementKind::MoveFront, 30)?;
    w.run_for(settle);
    let after = w.poses();
    let moved: Vec<usize> = (0..2 * PER_NET).filter(|&i| before[i] != after[i]).collect();
    c.add("unbridged_topic_stays_local", moved == vec![1], format!("moved {moved:?}, expected [1]"));

    // Relay outage: messages wait in the bounded queue and flow after recovery.
    w.set_relay_up(false);
    let before = w.poses();
    w.command(a, "group-x", MovementKind::MoveBack, 10)?;
    w.run_for(settle);
    let during = w.poses();
    let remote_still = [3, 4].iter().all(|&i| during[i] == before[i]);
    w.set_relay_up(true);
    w.run_for(settle);
    let after = w.poses();
    let remote_caught_up = [3, 4].iter().all(|&i| after[i] != before[i]);
    c.add("relay_outage_queues", remote_still && remote_caught_up, format!("held: {remote_still}, delivered after recovery: {remote_caught_up}"));

    // Bidirectional soak on one bridged topic.
    let total = cfg.bridge_soak;
    let half = total / 2;
    let interval_us = (1e6 / cfg.bridge_soak_rate).round() as u64;
    let t0 = w.now() + Duration::from_millis(100);
    let sent_before = w.receptions().len();
    for (net, range) in [(a, 0..half), (b, half..total)] {
        schedule_soak(&mut w, net, t0, interval_us, range.start, range.end);
    }
    let end = t0 + Duration(interval_us * half.max(total - half)) + Duration::from_secs(10);
    w.run_until(end);

    let mut per_robot: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); 2 * PER_NET];
    for r in &w.receptions()[sent_before..] {
        *per_robot[r.robot].entry(r.seq).or_insert(0) += 1;
    }
    let complete = per_robot.iter().all(|m| m.len() as u64 == total && m.values().all(|&k| k == 1));
    let counts: Vec<usize> = per_robot.iter().map(BTreeMap::len).collect();
    c.add("soak_exactly_once", complete, format!("distinct per robot {counts:?} of {total}"));

    let mut crossings: BTreeMap<Vec<u8>, u32> = BTreeMap::new();
    for k in 0..w.bridge_count() {
        for x in w.bridge(k).crossings().iter().filter(|x| x.topic == "soak") {
            *crossings.entry(x.message.clone()).or_insert(0) += 1;
        }
    }
    let max_cross = crossings.values().copied().max().unwrap_or(0);
    c.add(
        "no_double_crossing",
        max_cross <= 1 && crossings.len() as u64 == total,
        format!("{} soak messages crossed, most crossings of one message {max_cross}", crossings.len()),
    );
    let (ca, cb) = (w.bridge(0).counters(), w.bridge(1).counters());
    // Each endpoint sees its own republished copies echoed back by the local broker.
    c.add(
        "echoes_suppressed",
        ca.suppressed == ca.republished && cb.suppressed == cb.republished,
        format!("A suppressed {} of {} republished, B suppressed {} of {}", ca.suppressed, ca.republished, cb.suppressed, cb.republished),
    );

    let mut m = BTreeMap::new();
    m.insert("soak_messages".into(), total as f64);
    m.insert("crossings".into(), (ca.forwarded + cb.forwarded) as f64);
    m.insert("suppressed".into(), (ca.suppressed + cb.suppressed) as f64);
    m.insert("queue_dropped".into(), (ca.queue_dropped + cb.queue_dropped) as f64);
    Ok((c, m, w))
}

fn schedule_soak(w: &mut World, net: usize, t0: SimTime, interval_us: u64, first: u64, end: u64) {
    schedule_soak_at(w, net, t0, interval_us, first, first, end);
}

fn schedule_soak_at(w: &mut World, net: usize, t0: SimTime, interval_us: u64, first: u64, k: u64, end: u64) {
    if k >= end {
        return;
    }
    let at = t0 + Duration(interval_us * (k - first));
    w.schedule(at, move |w| {
        if w.publish_sequenced(net, "soak", k as u32).is_err() {
            w.note_harness_error();
        }
        schedule_soak_at(w, net, t0, interval_us, first, k + 1, end);
    });
}
