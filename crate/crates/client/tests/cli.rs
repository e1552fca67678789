use clap::Parser;
use romano_client::cli::{run, Cli, CliError};
use romano_client::Client;
use romano_core::codec::RomanoMessage;
use romano_core::harness::HarnessError;

async fn serve() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum_serve(listener).await });
    format!("http://{addr}")
}

async fn axum_serve(listener: tokio::net::TcpListener) {
    romano_service::serve(listener).await.unwrap();
}

fn cli(server: &str, args: &[&str]) -> Cli {
    let mut argv = vec!["romano", "--server", server];
    argv.extend_from_slice(args);
    Cli::try_parse_from(argv).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn client_calls_codec_routes() {
    let c = Client::new(serve().await);
    assert_eq!(c.health().await.unwrap()["status"], "ok");
    let msg = RomanoMessage::MqttSubscribe { topic: "group-a".into() };
    let enc = c.encode(&msg).await.unwrap();
    assert_eq!(enc.len, 9);
    assert_eq!(c.decode(&enc.hex).await.unwrap(), msg);
    let id = c.romano_id("fe80::212:4b00:0:1").await.unwrap();
    assert_eq!(id.romano_id.as_str(), "00000001");
    let err = c.decode("01").await.unwrap_err();
    assert_eq!(err.kind(), Some("codec"));
}

#[tokio::test(flavor = "multi_thread")]
async fn throughput_writes_run_directory() {
    let server = serve().await;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tp");
    let args = ["throughput", "--robots", "3", "--rate", "50", "--messages", "100", "--out-dir", out.to_str().unwrap()];
    let outcome = run(cli(&server, &args)).await.unwrap();
    assert!(outcome.summary[0].contains("delivery ratio 1.0000"), "{:?}", outcome.summary);
    for f in ["report.csv", "report.json", "wire_trace.log", "pose_trace.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_robots,robot,romano_id,position,published,received,delivery_ratio,delay_min_ms,delay_mean_ms,delay_max_ms"
    );
    assert_eq!(lines.count(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn scenario_file_and_flags_combine() {
    let server = serve().await;
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.conf");
    std::fs::write(&scenario, "# delay sweep\nsweep_robots = 1,2,3\nlink_latency_ms = 20\nmessages = 40\n").unwrap();
    let out = dir.path().join("sc");
    let args = ["scalability", "--scenario", scenario.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    let outcome = run(cli(&server, &args)).await.unwrap();
    let fit = outcome.summary.iter().find(|l| l.starts_with("max delay")).unwrap();
    assert!(fit.contains("+ 8.000 * n"), "{fit}");
    let rows = std::fs::read_to_string(out.join("report.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 1 + 2 + 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn demo_success_and_failure_exit_codes() {
    let server = serve().await;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let args = ["demo", "--demo", "group-control", "--out-dir", out.to_str().unwrap()];
    run(cli(&server, &args)).await.unwrap();
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("check,passed,detail"));

    // A two-round budget cannot reach the band from 0.3 m, so the demo must fail.
    let out = dir.path().join("dsp");
    let args = [
        "demo", "--demo", "dispersal", "--set", "dispersal_rounds=2", "--set", "dispersal_round_limit=2",
        "--out-dir", out.to_str().unwrap(),
    ];
    let err = run(cli(&server, &args)).await.unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    match err {
        CliError::Harness(HarnessError::DemoAssertionFailed { demo, trace_path, .. }) => {
            assert_eq!(demo, "dispersal");
            assert!(std::path::Path::new(&trace_path.unwrap()).is_file());
        }
        other => panic!("{other}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn command_injects_into_ephemeral_and_named_sessions() {
    let server = serve().await;
    let args = ["command", "--target", "common", "--movement", "MoveFront", "--magnitude", "50", "--robots", "2"];
    let outcome = run(cli(&server, &args)).await.unwrap();
    let info = outcome.session.unwrap();
    assert!(info.robots.iter().all(|r| r.pose.x == 50.0));

    let c = Client::new(server.clone());
    let req = romano_core::api::RunRequest { overrides: [("robots".into(), "2".into())].into(), ..Default::default() };
    let s = c.create_session(&req).await.unwrap();
    let target = s.robots[0].romano_id.to_string();
    let id = s.id.to_string();
    let args = ["command", "--session", &id, "--target", &target, "--movement", "rotate-left", "--magnitude", "90"];
    let outcome = run(cli(&server, &args)).await.unwrap();
    let info = outcome.session.unwrap();
    assert_eq!(info.robots[0].pose.heading, 90.0);
    assert_eq!(info.robots[1].pose.heading, 0.0);
    assert!(c.session(s.id).await.is_ok(), "named sessions survive the command");

    let args = ["command", "--session", &id, "--target", "nobody", "--movement", "MoveFront", "--magnitude", "1"];
    let err = run(cli(&server, &args)).await.unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("unknown target"), "{err}");
    let args = ["command", "--session", &id, "--target", "common", "--movement", "MoveFront", "--magnitude", "70000"];
    let err = run(cli(&server, &args)).await.unwrap_err();
    assert!(err.to_string().contains("70000"), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn sweep_writes_csv() {
    let server = serve().await;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let args = ["sweep", "--messages", "100", "--set", "sweep_rates=1,300", "--out-dir", out.to_str().unwrap()];
    let outcome = run(cli(&server, &args)).await.unwrap();
    assert_eq!(outcome.summary.len(), 3);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
