use std::fs;
use std::path::Path;

use cdnlab_core::analysis::{load_series_csv, Trend};
use cdnlab_core::metrics::{MetricKind, MISSING};
use cdnlab_core::orchestrator::{run_experiment, run_suite, RunOptions};
use cdnlab_core::topology::{load_scenario, ExperimentConfig, Scenario};
use cdnlab_core::Error;

fn quick() -> RunOptions {
    RunOptions {
        quick: true,
        ..RunOptions::default()
    }
}

fn scenario(name: &str, config: ExperimentConfig) -> Scenario {
    Scenario {
        name: name.into(),
        source: config.to_json(),
        config,
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn quick_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let s = load_scenario("testbed-4").unwrap();
    let run = run_experiment(&s, dir.path(), &quick()).unwrap();
    assert_eq!(run.run_id, "testbed-4-seed7");
    assert_eq!(read(&run.scenario_file), s.source.as_bytes());
    assert_eq!(run.rtt.rows.len(), 100);
    assert_eq!(run.cpu.rows.len(), 100);
    assert_eq!(run.rtt.columns, ["s1", "s2", "s3", "s4"]);
    assert!(run.sessions_completed >= 1);
    assert_eq!(run.stream_reports.len(), 1);
    for p in [&run.ping_csv, &run.cpu_csv, &run.decision_log, &run.mutation_log, &run.segment_logs[0]] {
        assert!(p.is_file(), "{}", p.display());
    }
    assert!(dir.path().join("run.json").is_file());
    for f in ["report.json", "report.txt", "rtt_boxplot.svg", "cpu_timeseries.csv"] {
        assert!(run.report_dir.join(f).is_file(), "{f}");
    }
    // What was written is what was returned.
    assert_eq!(load_series_csv(&run.ping_csv, MetricKind::Rtt).unwrap(), run.rtt);
    assert_eq!(load_series_csv(&run.cpu_csv, MetricKind::Cpu).unwrap(), run.cpu);
    let decisions = fs::read_to_string(&run.decision_log).unwrap();
    assert!(decisions.starts_with("timestamp,filename,chosen,min_rtt_ms,fallback,probe_values\n"));
    assert!(decisions.lines().count() > 11);
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = load_scenario("edge-2").unwrap();
    let ra = run_experiment(&s, a.path(), &quick()).unwrap();
    let rb = run_experiment(&s, b.path(), &quick()).unwrap();
    for (x, y) in [
        (&ra.ping_csv, &rb.ping_csv),
        (&ra.cpu_csv, &rb.cpu_csv),
        (&ra.decision_log, &rb.decision_log),
        (&ra.mutation_log, &rb.mutation_log),
    ] {
        assert_eq!(read(x), read(y), "{}", x.display());
    }
    // The edge profile runs the mutator.
    assert!(fs::read_to_string(&ra.mutation_log).unwrap().lines().count() > 1);

    let c = tempfile::tempdir().unwrap();
    let other = RunOptions {
        seed: Some(8),
        ..quick()
    };
    let rc = run_experiment(&s, c.path(), &other).unwrap();
    assert_eq!(rc.run_id, "edge-2-seed8");
    assert_ne!(read(&ra.ping_csv), read(&rc.ping_csv));
}

#[test]
fn down_server_column_is_missing_throughout() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::testbed(4);
    config.down_servers = vec![2];
    let run = run_experiment(&scenario("down", config), dir.path(), &quick()).unwrap();
    assert!(run.sessions_completed >= 1);
    assert!(run.rtt.column("s3").unwrap().iter().all(Option::is_none));
    assert!(run.rtt.column("s1").unwrap().iter().all(Option::is_some));
    let text = fs::read_to_string(&run.ping_csv).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(3) == Some(MISSING)));
    let report = fs::read_to_string(run.report_dir.join("report.txt")).unwrap();
    assert!(report.contains("unresponsive servers: s3"));
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::testbed(4);
    config.base_rtt_ms.pop();
    config.recorder.num_pings = 0;
    let err = run_experiment(&scenario("bad", config), dir.path(), &quick()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    assert!(!dir.path().join("ping.csv").exists());
}

#[test]
fn suite_shows_increasing_latency() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios: Vec<_> = ["testbed-12", "testbed-4", "testbed-8"]
        .iter()
        .map(|p| load_scenario(p).unwrap())
        .collect();
    let out = run_suite(&scenarios, dir.path(), &quick()).unwrap();
    let counts: Vec<_> = out.report.per_config.iter().map(|c| c.server_count).collect();
    assert_eq!(counts, [4, 8, 12]);
    let means: Vec<_> = out.report.per_config.iter().map(|c| c.rtt_mean_ms).collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
    assert_eq!(out.report.rtt_trend, Trend::Increasing);
    for name in ["testbed-4", "testbed-8", "testbed-12"] {
        assert!(dir.path().join(name).join("ping.csv").is_file());
    }
    assert!(out.report_dir.join("rtt_boxplot.svg").is_file());
}

#[test]
fn suite_needs_two_distinct_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let one = [load_scenario("testbed-4").unwrap()];
    assert!(matches!(run_suite(&one, dir.path(), &quick()), Err(Error::InsufficientConfigs(1))));
    let twice = [load_scenario("testbed-4").unwrap(), load_scenario("testbed-4").unwrap()];
    assert!(matches!(run_suite(&twice, dir.path(), &quick()), Err(Error::InvalidConfig(_))));
}

#[test]
fn identical_configs_are_flat() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::testbed(4);
    let out = run_suite(
        &[scenario("a", config.clone()), scenario("b", config)],
        dir.path(),
        &quick(),
    )
    .unwrap();
    assert_eq!(out.report.rtt_trend, Trend::Flat);
}

#[test]
fn scenario_file_is_snapshotted_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let mut source = ExperimentConfig::testbed(2).to_json();
    source.push_str("\n\n");
    let file = dir.path().join("mine.json");
    fs::write(&file, &source).unwrap();
    let s = load_scenario(file.to_str().unwrap()).unwrap();
    assert_eq!(s.name, "mine");
    let out = dir.path().join("out");
    let run = run_experiment(&s, &out, &quick()).unwrap();
    assert_eq!(read(&run.scenario_file), source.as_bytes());
}

#[test]
fn wall_clock_run_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::testbed(2);
    config.base_rtt_ms = vec![4.0, 8.0];
    config.rtt_noise_lambda_ms = 0.0;
    config.recorder.num_pings = 3;
    config.recorder.ping_interval_s = 0.1;
    config.recorder.cpu_iterations = 3;
    config.recorder.cpu_interval_s = 0.1;
    config.content.segment_count = 2;
    config.content.segment_bytes = 2048;
    config.client.rate_bytes_per_s = None;
    config.client.loop_until_done = false;
    let options = RunOptions {
        wall: true,
        ..RunOptions::default()
    };
    let run = run_experiment(&scenario("wall", config), dir.path(), &options).unwrap();
    assert_eq!(run.rtt.rows.len(), 3);
    assert_eq!(run.sessions_completed, 1);
    // Loopback adds time but never removes the emulated delay.
    for (i, base) in [(0, 4.0), (1, 8.0)] {
        for v in run.rtt.rows.iter().map(|r| r.values[i]) {
            let v = v.expect("reachable server answers");
            assert!(v >= base, "{v} < {base}");
        }
    }
}
