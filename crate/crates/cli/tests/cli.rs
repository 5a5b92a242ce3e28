use std::path::Path;
use std::process::{Command, Output};

use swarmproto::scenario::CONFIG_KEYS;

fn swarmproto(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarmproto")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["-h"], &["run", "--help"], &["validate", "--help"]] {
        let out = swarmproto(args, dir.path());
        assert!(out.status.success());
        let text = stdout(&out);
        for (key, _) in CONFIG_KEYS {
            assert!(text.contains(key), "{args:?} help is missing {key}");
        }
    }
}

#[test]
fn unknown_verb_and_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!swarmproto(&["fly"], dir.path()).status.success());
    let out = swarmproto(&["validate", "--benchmark", "--set", "model.mass=2"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("model.mass"));
}

#[test]
fn validate_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarmproto(&["validate", "--benchmark"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("18 coupled constraint rows").count(), 4);
    let barriers: Vec<f64> = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("h(").and_then(|r| r.split("= ").nth(1)))
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(barriers.len(), 6);
    assert!(barriers.iter().all(|&h| h >= 0.0));
    // same input, same report
    assert_eq!(stdout(&swarmproto(&["validate", "--benchmark"], dir.path())), text);
}

#[test]
fn validate_names_unsafe_pair() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "mission.initial_positions = [[0, 1], [0, -1], [1, 0], [0.9, 0.05]]\n")
        .unwrap();
    let out = swarmproto(&["validate", "-c", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("agents 3 and 4"), "{}", stderr(&out));
}

#[test]
fn run_echoes_overrides_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("swap.cfg"), "mission.steps = 5\n").unwrap();
    let out = swarmproto(
        &["run", "-c", "swap.cfg", "--set", "links.drop_prob=0.3", "--seed", "7", "-o", "res"],
        dir.path(),
    );
    // five steps are not enough to arrive; that is reported, not an error
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("all arrived: false"));
    for line in stdout(&out).lines().filter_map(|l| l.strip_prefix("wrote ")) {
        assert!(dir.path().join(line).exists(), "{line}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["links"]["drop_prob"], 0.3);
    assert_eq!(manifest["config"]["steps"], 5);
    let overrides: Vec<&str> = manifest["overrides"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(overrides, ["links.drop_prob=0.3", "links.seed=7"]);
}

#[test]
fn run_exit_code_for_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarmproto(
        &["run", "--benchmark", "--set", "solver.p_max=3", "--set", "mission.steps=2", "-o", "res"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn bench_stats_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarmproto(&["bench", "--benchmark", "-o", "b"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("budget: PASS"));
    assert!(stdout(&out).contains("0 violations"));

    let first = swarmproto(&["stats", "b/timing.csv", "-o", "s"], dir.path());
    assert!(first.status.success());
    let summary = std::fs::read_to_string(dir.path().join("s/summary.json")).unwrap();
    let second = swarmproto(&["stats", "b/timing.csv", "-o", "s"], dir.path());
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(std::fs::read_to_string(dir.path().join("s/summary.json")).unwrap(), summary);
    let json: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(json["budget_pass"], true);
    assert_eq!(json["agents"].as_array().unwrap().len(), 4);

    let out = swarmproto(&["plot", "b/trajectory.csv", "-o", "p"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    for i in 1..=4 {
        let csv = std::fs::read_to_string(dir.path().join(format!("p/agent_{i}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some("x,y"));
    }
    let svg = std::fs::read_to_string(dir.path().join("p/trajectories.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}

#[test]
fn stats_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = swarmproto(&["stats", "empty.csv"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("empty"));

    std::fs::write(dir.path().join("bad.csv"), "step,agent,seconds,inner_iters\n0,1,0.1,3\n0,2,abc,3\n").unwrap();
    let out = swarmproto(&["stats", "bad.csv"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn stats_flags_budget_overrun() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("slow.csv"), "step,agent,seconds,inner_iters\n0,1,0.3,3\n1,1,0.25,3\n2,1,0.4,3\n")
        .unwrap();
    let out = swarmproto(&["stats", "slow.csv"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("budget: FAIL"));
}
