mod common;

use common::*;
use nalgebra::Vector2;
use swarmproto::comms::{bandwidth_report, read_message_log, TopologyKind};
use swarmproto::runtime::{run_mission, ExitStatus};
use swarmproto::scenario::*;

#[test]
fn benchmark_swaps_safely() {
    let cfg = benchmark_position_swap();
    let report = run_mission(&cfg);
    assert_eq!(report.status, ExitStatus::Success, "{:?}", report.failure);
    assert!(report.all_arrived);
    assert!(report.steps_run <= 150);

    let last = report.trajectory.last_step().unwrap();
    for r in report.trajectory.records.iter().filter(|r| r.step == last) {
        let target = Vector2::from(cfg.target_positions[r.agent - 1]);
        assert!((Vector2::new(r.px, r.py) - target).norm() <= 0.05);
    }
    let audit = audit_trajectory(&report.trajectory, &cfg.cbf);
    assert!(audit.safe(), "{:?}", audit.violations);
    assert!(audit.decrement_failures.iter().all(|f| !f.2));

    // controls respect the box
    assert!(report.trajectory.records.iter().all(|r| r.ax.abs() <= cfg.a_max && r.ay.abs() <= cfg.a_max));
}

#[test]
fn trajectory_layout() {
    let report = run_mission(&benchmark_position_swap());
    let n = 4;
    let last = report.trajectory.last_step().unwrap();
    assert_eq!(report.trajectory.records.len(), n * (last as usize + 1));
    for (idx, r) in report.trajectory.records.iter().enumerate() {
        assert_eq!((r.step, r.agent), ((idx / n) as u64, idx % n + 1));
    }
    assert_eq!(report.timing.records.len(), n * last as usize);
    assert!(report.timing.records.iter().all(|t| t.seconds >= 0.0 && t.inner_iters >= 1));
}

#[test]
fn deterministic_runs() {
    let cfg = benchmark_position_swap();
    assert_eq!(runs_identical(&cfg), (true, true));
    let mut lossy = cfg.clone();
    lossy.links.drop_prob = 0.3;
    lossy.links.seed = 11;
    assert_eq!(runs_identical(&lossy), (true, true));
}

#[test]
fn seed_changes_lossy_outcome() {
    let mut a = benchmark_position_swap();
    a.links.drop_prob = 0.3;
    a.steps = 10;
    let mut b = a.clone();
    b.links.seed = 99;
    assert_ne!(message_bytes(&run_mission(&a)), message_bytes(&run_mission(&b)));
}

#[test]
fn lockstep_message_log() {
    // every global round carries one record per directed edge
    for kind in [TopologyKind::FullyConnected, TopologyKind::Ring, TopologyKind::Star] {
        let cfg = circle_swap(5, 1.5, kind, 4);
        let report = run_mission(&cfg);
        let edges = 2 * cfg.build_topology().unwrap().edge_count();
        let rounds = report.messages.iter().map(|m| m.round).max().unwrap() + 1;
        assert_eq!(report.messages.len() as u64, rounds * edges as u64, "{kind}");
        for round in 0..rounds {
            assert_eq!(report.messages.iter().filter(|m| m.round == round).count(), edges);
        }
        let bw = bandwidth_report(&report.messages);
        assert_eq!(bw.total.sent, report.messages.len() as u64);
    }
}

#[test]
fn trackers_preserve_means() {
    for n in [2, 4, 8] {
        for kind in [TopologyKind::FullyConnected, TopologyKind::Ring, TopologyKind::Star] {
            let cfg = circle_swap(n, 1.5, kind, 3);
            let (drift, rounds, _) = tracker_drift(&cfg);
            assert!(rounds > 0);
            assert!(drift <= 1e-12, "n={n} {kind}: {drift:e}");
        }
    }
}

#[test]
fn pseudo_gradient_matches_differences() {
    assert!(pseudo_gradient_fd_error(100, 5) < 1e-6);
}

#[test]
fn two_agent_equilibrium() {
    let cfg = coupled_pair();
    let grid = grid_equilibrium(&cfg);
    assert!(constraint_active(&cfg, &grid), "instance should exercise the coupling");
    let report = run_mission(&cfg);
    assert_eq!(report.status, ExitStatus::Success, "{:?}", report.failure);
    let solved = first_controls(&report);
    for i in 0..2 {
        assert!((solved[i] - grid[i]).amax() <= 0.01, "agent {}: {:?} vs {:?}", i + 1, solved[i], grid[i]);
    }
}

#[test]
fn cap_sets_exit_status() {
    let mut cfg = benchmark_position_swap();
    cfg.solver.p_max = 3;
    cfg.steps = 2;
    let report = run_mission(&cfg);
    assert_eq!(report.status, ExitStatus::SolverCapExhausted);
    assert_eq!(report.status.code(), 2);
    assert!(report.trajectory.any_unconverged());
}

#[test]
fn barrier_timeout_status() {
    use swarmproto::model::AgentState;
    use swarmproto::runtime::{MissionOptions, Plant, PlantTag, PlantError, SimpleModelPlant};
    struct Slow(SimpleModelPlant);
    impl Plant for Slow {
        fn tag(&self) -> PlantTag {
            PlantTag::External
        }
        fn step(&mut self, s: &AgentState, u: &Vector2<f64>, ts: f64) -> Result<AgentState, PlantError> {
            std::thread::sleep(std::time::Duration::from_millis(400));
            self.0.step(s, u, ts)
        }
    }
    let mut cfg = benchmark_position_swap();
    cfg.steps = 2;
    cfg.barrier_timeout_s = 0.1;
    let options = MissionOptions {
        plant: Some(Box::new(|i, m| {
            if i == 0 {
                Box::new(Slow(SimpleModelPlant::new(m.clone()))) as Box<dyn Plant>
            } else {
                Box::new(SimpleModelPlant::new(m.clone()))
            }
        })),
        trace: None,
    };
    let report = swarmproto::runtime::run_mission_with(&cfg, options);
    assert_eq!(report.status, ExitStatus::BarrierTimeout, "{:?}", report.failure);
    assert_eq!(report.status.code(), 3);
    // step-0 rows were logged before the stall
    assert_eq!(report.trajectory.records.iter().filter(|r| r.step == 0).count(), 4);
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_position_swap();
    cfg.links.seed = 42;
    cfg.steps = 5;
    let report = run_mission(&cfg);
    let files = write_run_artifacts(dir.path(), &cfg, &report, &["links.seed=42".to_string()]).unwrap();
    assert!(files.iter().all(|f| f.exists()));

    let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRAJECTORY_HEADER);
    let back = TrajectoryLog::read_csv(text.as_bytes()).unwrap();
    assert_eq!(back, report.trajectory);
    let timing = TimingLog::read_csv(std::fs::File::open(dir.path().join("timing.csv")).unwrap()).unwrap();
    assert_eq!(timing, report.timing);
    let messages =
        read_message_log(std::io::BufReader::new(std::fs::File::open(dir.path().join("messages.jsonl")).unwrap()))
            .unwrap();
    assert_eq!(messages, report.messages);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["exit_status"], report.status.code());
    let echoed = load_config(manifest["config_text"].as_str().unwrap()).unwrap();
    assert_eq!(echoed, cfg);

    let plots = write_plot_data(&dir.path().join("plot"), &report.trajectory, &cfg.cbf).unwrap();
    assert_eq!(plots.len(), 5);
    let svg = std::fs::read_to_string(plots.last().unwrap()).unwrap();
    assert_eq!(svg.matches(r#"class="safety""#).count(), 4);
}
