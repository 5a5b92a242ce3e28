#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DVector, Matrix2, Matrix4, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmproto::comms::{write_message_log, TopologyKind};
use swarmproto::game::{sigma_true, CostParams, LocalGame};
use swarmproto::model::{discretize, terminal_weight, ErrorState};
use swarmproto::runtime::{run_mission, run_mission_with, MissionOptions, MissionReport};
use swarmproto::scenario::{benchmark_position_swap, ScenarioConfig};

/// `n` agents on a circle of radius `rho`, each heading to the antipode.
pub fn circle_swap(n: usize, rho: f64, kind: TopologyKind, steps: usize) -> ScenarioConfig {
    let mut cfg = benchmark_position_swap();
    let at = |i: usize| {
        let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64 + 0.1;
        [rho * t.cos(), rho * t.sin()]
    };
    cfg.n_agents = n;
    cfg.initial_positions = (0..n).map(at).collect();
    cfg.target_positions = (0..n).map(|i| {
        let p = at(i);
        [-p[0], -p[1]]
    }).collect();
    cfg.topology.kind = kind;
    cfg.topology.hub = 1;
    cfg.steps = steps;
    cfg.validate().expect("circle scenario is valid");
    cfg
}

/// Largest violation of the two tracking invariants over every (step, round):
/// `sum_i s_i = sum_i phi_i` and `sum_i y_i = sum_i g_i`.
pub fn tracker_drift(cfg: &ScenarioConfig) -> (f64, usize, MissionReport) {
    type Key = (u64, usize);
    let sums: Arc<Mutex<BTreeMap<Key, (DVector<f64>, DVector<f64>, usize)>>> = Arc::default();
    let sink = Arc::clone(&sums);
    let options = MissionOptions {
        plant: None,
        trace: Some(Arc::new(move |step, t| {
            let mut map = sink.lock().unwrap();
            let entry = map
                .entry((step, t.round))
                .or_insert_with(|| (DVector::zeros(t.s.len()), DVector::zeros(t.y.len()), 0));
            entry.0 += &t.s - &t.phi;
            entry.1 += &t.y - &t.g;
            entry.2 += 1;
        })),
    };
    let report = run_mission_with(cfg, options);
    let map = sums.lock().unwrap();
    let n = cfg.n_agents;
    let mut worst: f64 = 0.0;
    for (s_gap, y_gap, count) in map.values() {
        assert_eq!(*count, n, "every agent reports every round");
        worst = worst.max(s_gap.amax());
        if !y_gap.is_empty() {
            worst = worst.max(y_gap.amax());
        }
    }
    (worst, map.len(), report)
}

pub fn trajectory_bytes(report: &MissionReport) -> Vec<u8> {
    let mut buf = Vec::new();
    report.trajectory.write_csv(&mut buf).unwrap();
    buf
}

pub fn message_bytes(report: &MissionReport) -> Vec<u8> {
    let mut buf = Vec::new();
    write_message_log(&report.messages, &mut buf).unwrap();
    buf
}

/// Two runs of the same config, compared byte for byte.
pub fn runs_identical(cfg: &ScenarioConfig) -> (bool, bool) {
    let a = run_mission(cfg);
    let b = run_mission(cfg);
    (trajectory_bytes(&a) == trajectory_bytes(&b), message_bytes(&a) == message_bytes(&b))
}

/// Worst relative error between `pseudo_gradient` and a central difference of
/// the agent's cost with the aggregate recomputed, over `instances` draws.
pub fn pseudo_gradient_fd_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=6usize);
        let horizon = rng.random_range(1..=5usize);
        let ts = rng.random_range(0.05..0.5);
        let model = discretize(ts, 2.0).unwrap();
        let q = Matrix4::from_diagonal(&Vector4::from_fn(|_, _| rng.random_range(0.5..10.0)));
        let r = Matrix2::from_diagonal(&Vector2::from_fn(|_, _| rng.random_range(0.5..5.0)));
        let p = terminal_weight(&model, &q, &r).unwrap();
        let params = CostParams {
            q,
            r,
            p,
            beta: rng.random_range(0.5..3.0),
            pa: rng.random_range(0.0..5.0),
            po: Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            n,
        };
        let games: Vec<LocalGame> = (0..n).map(|_| LocalGame::new(&model, horizon, params.clone())).collect();
        let refs: Vec<&LocalGame> = games.iter().collect();
        let e0s: Vec<ErrorState> =
            (0..n).map(|_| ErrorState(Vector4::from_fn(|_, _| rng.random_range(-2.0..2.0)))).collect();
        let targets: Vec<Vector2<f64>> =
            (0..n).map(|_| Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        let mut us: Vec<DVector<f64>> =
            (0..n).map(|_| DVector::from_fn(2 * horizon, |_, _| rng.random_range(-2.0..2.0))).collect();
        let i = rng.random_range(0..n);

        let sigma = sigma_true(&refs, &e0s, &us, &targets);
        let analytic = games[i].pseudo_gradient(&e0s[i], &us[i], &sigma).unwrap();
        let step = 1e-6;
        let mut fd = DVector::zeros(2 * horizon);
        for k in 0..2 * horizon {
            let base = us[i][k];
            us[i][k] = base + step;
            let plus = games[i].cost(&e0s[i], &us[i], &sigma_true(&refs, &e0s, &us, &targets)).unwrap();
            us[i][k] = base - step;
            let minus = games[i].cost(&e0s[i], &us[i], &sigma_true(&refs, &e0s, &us, &targets)).unwrap();
            us[i][k] = base;
            fd[k] = (plus - minus) / (2.0 * step);
        }
        let rel = (&fd - &analytic).norm() / analytic.norm().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// Two agents, one-step horizon, an active collision row. Returns the
/// instance config.
pub fn coupled_pair() -> ScenarioConfig {
    let mut cfg = benchmark_position_swap();
    cfg.n_agents = 2;
    cfg.horizon = 1;
    cfg.steps = 1;
    cfg.initial_positions = vec![[-0.25, 0.0], [0.25, 0.1]];
    cfg.target_positions = vec![[1.0, 0.0], [-1.0, 0.1]];
    cfg.cbf.margin = 0.0;
    cfg.solver.eps = 1e-7;
    cfg.solver.p_max = 200_000;
    cfg.validate().unwrap();
    cfg
}

/// Equilibrium of the two-agent, one-step game by brute-force search.
///
/// The coupling term is the same for both players, so the game has the exact
/// potential `sum_i local_i(u_i) + (pa / N) |sigma - po|^2` and its
/// equilibrium under the shared constraint is the potential's minimiser over
/// the joint feasible set. The search grids `[-a_max, a_max]^4` coarse to fine.
/// Kinematics and barrier are written out here independently of the crate.
pub fn grid_equilibrium(cfg: &ScenarioConfig) -> [Vector2<f64>; 2] {
    assert_eq!((cfg.n_agents, cfg.horizon), (2, 1));
    let ts = cfg.ts;
    let q = cfg.q_matrix();
    let r = cfg.r_matrix();
    let p = cfg.terminal_weight().unwrap();
    let po = Vector2::from(cfg.po);
    let start: Vec<Vector2<f64>> = cfg.initial_positions.iter().map(|&x| Vector2::from(x)).collect();
    let target: Vec<Vector2<f64>> = cfg.target_positions.iter().map(|&x| Vector2::from(x)).collect();
    let h = |d: Vector2<f64>| d.x.abs() / cfg.cbf.r1 + d.y.abs() / cfg.cbf.r2 - 1.0;
    let h0 = h(start[0] - start[1]);

    let next = |i: usize, a: Vector2<f64>| -> (Vector2<f64>, Vector2<f64>) {
        // at rest initially
        (start[i] + a * (ts * ts / 2.0), a * ts)
    };
    let potential = |a: [Vector2<f64>; 2]| -> Option<f64> {
        let (p0, _) = next(0, a[0]);
        let (p1, _) = next(1, a[1]);
        if h(p0 - p1) - (1.0 - cfg.cbf.gamma) * h0 < 0.0 {
            return None;
        }
        let mut total = 0.0;
        for i in 0..2 {
            let e0 = Vector4::new(start[i].x - target[i].x, start[i].y - target[i].y, 0.0, 0.0);
            let (pos, vel) = next(i, a[i]);
            let e1 = Vector4::new(pos.x - target[i].x, pos.y - target[i].y, vel.x, vel.y);
            total += e0.dot(&(q * e0)) + a[i].dot(&(r * a[i])) + cfg.beta * e1.dot(&(p * e1));
        }
        let sigma = (next(0, a[0]).0 + next(1, a[1]).0) / 2.0;
        Some(total + cfg.pa / 2.0 * (sigma - po).norm_squared())
    };

    let mut centre = [0.0f64; 4];
    let mut half = cfg.a_max;
    let mut step = 0.1;
    for _ in 0..4 {
        let axis = |c: f64| -> Vec<f64> {
            let lo = (c - half).max(-cfg.a_max);
            let hi = (c + half).min(cfg.a_max);
            let count = ((hi - lo) / step).round() as usize;
            (0..=count).map(|k| (lo + k as f64 * step).min(hi)).collect()
        };
        let axes: Vec<Vec<f64>> = centre.iter().map(|&c| axis(c)).collect();
        let mut best = (f64::INFINITY, centre);
        for &a in &axes[0] {
            for &b in &axes[1] {
                for &c in &axes[2] {
                    for &d in &axes[3] {
                        if let Some(v) = potential([Vector2::new(a, b), Vector2::new(c, d)]) {
                            if v < best.0 {
                                best = (v, [a, b, c, d]);
                            }
                        }
                    }
                }
            }
        }
        centre = best.1;
        half = 1.5 * step;
        step /= 10.0;
    }
    [Vector2::new(centre[0], centre[1]), Vector2::new(centre[2], centre[3])]
}

/// First applied controls of a one-step mission.
pub fn first_controls(report: &MissionReport) -> Vec<Vector2<f64>> {
    report.trajectory.records.iter().filter(|r| r.step == 0).map(|r| Vector2::new(r.ax, r.ay)).collect()
}

/// Whether the shared row is active at the grid equilibrium.
pub fn constraint_active(cfg: &ScenarioConfig, a: &[Vector2<f64>; 2]) -> bool {
    let ts = cfg.ts;
    let h = |d: Vector2<f64>| d.x.abs() / cfg.cbf.r1 + d.y.abs() / cfg.cbf.r2 - 1.0;
    let s0 = Vector2::from(cfg.initial_positions[0]);
    let s1 = Vector2::from(cfg.initial_positions[1]);
    let h0 = h(s0 - s1);
    let h1 = h(s0 + a[0] * (ts * ts / 2.0) - s1 - a[1] * (ts * ts / 2.0));
    (h1 - (1.0 - cfg.cbf.gamma) * h0).abs() < 1e-3
}
