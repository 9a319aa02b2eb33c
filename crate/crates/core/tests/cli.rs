use lanecraft::checks::CheckReport;
use lanecraft::pipeline::BenchReport;
use lanecraft::sim::episode::EpisodeResult;
use lanecraft::sim::scenario::ScenarioSpec;
use std::path::Path;
use std::process::{Command, Output};

fn lanecraft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanecraft"))
        .args(args)
        .env_remove("LANECRAFT_SEED")
        .output()
        .expect("binary runs")
}

fn results(out: &Output) -> Vec<EpisodeResult> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("result record"))
        .collect()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_parseable_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let out = lanecraft(&["gen", "--kind", "straight", "--seed", "1", "--out", path_arg(p)]);
        assert_eq!(out.status.code(), Some(0));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let spec: ScenarioSpec = serde_json::from_slice(&bytes).unwrap();
    assert_eq!((spec.seed, spec.lanes.len(), spec.agents.len()), (1, 1, 0));
}

#[test]
fn gen_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lanecraft(&["gen", "--kind", "nope", "--out", path_arg(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario kind 'nope'"));
    let out = lanecraft(&["gen", "--kind", "curve", "--out", path_arg(&dir.path().join("missing/x.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_straight_oracle_completes() {
    let out = lanecraft(&["run", "--kind", "straight", "--mode", "oracle"]);
    assert_eq!(out.status.code(), Some(0));
    let r = results(&out);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].rc, 1.0);
    assert!(r[0].infractions.is_empty());
}

#[test]
fn run_without_late_fusion_collides() {
    let out = lanecraft(&["run", "--no-dlf", "--kind", "blocked_lane"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!results(&out)[0].infractions.is_empty());
}

#[test]
fn run_seed_batches_and_env_override() {
    let out = lanecraft(&["run", "--kind", "curve", "--seeds", "1..5"]);
    let seeds: Vec<u64> = results(&out).iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![1, 2, 3, 4, 5]);
    let out = Command::new(env!("CARGO_BIN_EXE_lanecraft"))
        .args(["run", "--kind", "curve", "--seed", "1"])
        .env("LANECRAFT_SEED", "8..9")
        .output()
        .unwrap();
    let seeds: Vec<u64> = results(&out).iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![8, 9]);
}

#[test]
fn run_traces_are_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = lanecraft(&["run", "--kind", "multi_lane", "--seed", "2", "--occ-noise", "0.1", "--out-dir", path_arg(d.path())]);
        assert_eq!(out.status.code(), Some(0));
    }
    let trace = |d: &tempfile::TempDir| std::fs::read(d.path().join("multi_lane_2.trace.jsonl")).unwrap();
    assert_eq!(trace(&dirs[0]), trace(&dirs[1]));
    let text = String::from_utf8(trace(&dirs[0])).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["t", "ego", "command", "stop", "infractions"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let result: EpisodeResult =
        serde_json::from_slice(&std::fs::read(dirs[0].path().join("multi_lane_2.result.json")).unwrap()).unwrap();
    assert_eq!(result.ticks, text.lines().count());
}

#[test]
fn run_scenario_file_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    lanecraft(&["gen", "--kind", "red_light", "--seed", "4", "--out", path_arg(&spec)]);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"ablation": {"tgp": true, "hef": true, "dlf": false}}"#).unwrap();
    let out = lanecraft(&["run", "--scenario", path_arg(&spec), "--config", path_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    let r = &results(&out)[0];
    assert_eq!(r.seed, 4);
    assert!(!r.infractions.is_empty());
}

#[test]
fn run_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"occ_noize": 0.1}"#).unwrap();
    let out = lanecraft(&["run", "--config", path_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("occ_noize"));
    let out = lanecraft(&["run", "--occ-noise", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lanecraft(&["run", "--seeds", "9..2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lanecraft(&["run", "--mode", "network", "--weights", path_arg(&dir.path().join("none.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_network_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"timeout": 3.0}"#).unwrap();
    let out = lanecraft(&["run", "--mode", "network", "--config", path_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &results(&out)[0];
    assert!(r.ticks <= 30 && (0.0..=1.0).contains(&r.rc));
}

#[test]
fn checks_pass_and_report() {
    for what in ["grad", "match", "fusion"] {
        let out = lanecraft(&["check", what]);
        assert_eq!(out.status.code(), Some(0), "{what}");
        let r: CheckReport = serde_json::from_slice(&out.stdout).unwrap();
        assert!(r.passed && r.failures.is_empty() && r.cases > 0);
        assert_eq!(r.check, what);
    }
    assert_eq!(lanecraft(&["check", "nothing"]).status.code(), Some(2));
}

#[test]
fn bench_reports_schema_and_is_stable() {
    let run = || {
        let out = lanecraft(&["bench", "--small", "--ticks", "200"]);
        assert_eq!(out.status.code(), Some(0));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        for key in ["median_ms", "p95_ms", "fps"] {
            assert!(v[key].as_f64().is_some_and(|x| x > 0.0), "{key}");
        }
        serde_json::from_value::<BenchReport>(v).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.ticks, 200);
    assert!(a.median_ms <= a.p95_ms);
    let ratio = a.median_ms / b.median_ms;
    assert!((1.0 / 3.0..=3.0).contains(&ratio), "medians {} vs {}", a.median_ms, b.median_ms);
}
