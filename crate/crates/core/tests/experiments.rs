use proptest::prelude::*;

use romano_core::harness::{run_throughput, ScenarioConfig};

fn lossy(robots: usize, rate: f64, loss: f64, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig { robots, rate_mps: rate, messages: 120, seed, trace: false, ..ScenarioConfig::default() };
    cfg.set("link_loss", &loss.to_string()).unwrap();
    cfg.set("link_latency_ms", "10-20").unwrap();
    // A small buffer so that some runs overflow.
    cfg.set("buffer_capacity", "40").unwrap();
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn copies_are_conserved(robots in 0usize..6, rate in 1.0f64..600.0, loss in 0.0f64..0.2, seed in any::<u64>()) {
        let r = run_throughput(&lossy(robots, rate, loss, seed)).unwrap().report;
        prop_assert!(r.conserved);
        prop_assert_eq!(r.copies_expected, r.published * robots as u64);
        prop_assert_eq!(r.copies_expected, r.delivered + r.link_dropped + r.buffer_dropped + r.in_flight);
        let received: u64 = r.per_robot.iter().map(|p| p.received).sum();
        prop_assert!(received <= r.delivered);
        for p in &r.per_robot {
            let ratio = p.delivery_ratio.unwrap();
            prop_assert!((0.0..=1.0).contains(&ratio));
        }
        prop_assert_eq!(r.buffer_dropped > 0, r.overflow_onset.is_some());
    }

    #[test]
    fn reports_depend_only_on_config(robots in 1usize..4, rate in 1.0f64..400.0, seed in any::<u64>()) {
        let cfg = lossy(robots, rate, 0.05, seed);
        prop_assert_eq!(run_throughput(&cfg).unwrap(), run_throughput(&cfg).unwrap());
    }
}
