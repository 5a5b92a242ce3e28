//! Scenario configuration in a flat `section.key = value` text format.
//!
//! Values are JSON literals (`0.2`, `true`, `[0, 1]`, `[[0, 1], [0, -1]]`) or
//! bare words for enumerations (`topology.kind = ring`). Blank lines and text
//! after `#` are ignored. Every key has a default; an empty document is the
//! four-agent position-swap benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use nalgebra::{Matrix2, Matrix4, Vector2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::comms::{LinkModel, Topology, TopologyKind};
use crate::runtime::RoundBarrier;
use crate::model::{discretize, terminal_weight, AgentModel, AgentState};
use crate::safety::{all_pairs, barrier_value, CbfParams};
use crate::solver::SolverParams;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}` given more than once")]
    DuplicateKey { key: String },
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsafe initial configuration: agents {first} and {second} start with barrier value {value:.4} < 0")]
    UnsafeStart { first: usize, second: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalTolerance {
    pub position: f64,
    pub velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    /// 1-based hub id for star graphs.
    pub hub: usize,
    /// 0/1 adjacency for mesh graphs.
    pub adjacency: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub delay_rounds: u32,
    pub drop_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_agents: usize,
    pub steps: usize,
    pub initial_positions: Vec<[f64; 2]>,
    pub target_positions: Vec<[f64; 2]>,
    pub ts: f64,
    pub a_max: f64,
    pub horizon: usize,
    pub q: [[f64; 4]; 4],
    pub r: [[f64; 2]; 2],
    pub beta: f64,
    pub pa: f64,
    pub po: [f64; 2],
    pub cbf: CbfParams,
    pub solver: SolverParams,
    pub topology: TopologyConfig,
    pub links: LinkConfig,
    pub arrival: ArrivalTolerance,
    pub barrier_timeout_s: f64,
}

/// Every supported key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("mission.n_agents", "number of agents"),
    ("mission.steps", "maximum number of receding-horizon steps"),
    ("mission.initial_positions", "start positions [[x, y], ...] in m"),
    ("mission.target_positions", "target positions [[x, y], ...] in m"),
    ("model.ts", "sample time in s"),
    ("model.a_max", "per-axis acceleration bound in m/s^2"),
    ("model.horizon", "prediction horizon in steps"),
    ("cost.q", "4x4 running state weight"),
    ("cost.r", "2x2 running input weight"),
    ("cost.beta", "terminal weight scale (terminal matrix from the Riccati equation)"),
    ("cost.pa", "fleet-centroid weight"),
    ("cost.po", "common tracking point [x, y] in m"),
    ("cbf.r1", "norm-1 unsafe radius along x in m"),
    ("cbf.r2", "norm-1 unsafe radius along y in m"),
    ("cbf.gamma", "barrier decrement rate in (0, 1]"),
    ("cbf.margin", "slack required of each decrement row, in barrier units"),
    ("solver.alpha_p", "primal step size"),
    ("solver.alpha_d", "dual step size"),
    ("solver.eps", "stopping threshold on max(primal, dual) change"),
    ("solver.p_max", "inner-iteration cap per step"),
    ("solver.warm_start", "reuse the shifted previous solution"),
    ("topology.kind", "fully_connected | ring | star | mesh"),
    ("topology.hub", "1-based hub agent for star graphs"),
    ("topology.adjacency", "0/1 adjacency matrix for mesh graphs"),
    ("links.delay_rounds", "link latency in whole rounds"),
    ("links.drop_prob", "per-message drop probability"),
    ("links.seed", "seed for all emulated randomness"),
    ("arrival.position_tol", "arrival tolerance on position in m"),
    ("arrival.velocity_tol", "arrival tolerance on speed in m/s"),
    ("runtime.barrier_timeout_s", "barrier timeout in s"),
];

/// Default decrement-row slack. Sits well above the infeasibility left by the
/// default stopping threshold.
pub const DEFAULT_CBF_MARGIN: f64 = 1e-3;

/// Four agents swapping positions pairwise through the origin.
pub fn benchmark_position_swap() -> ScenarioConfig {
    let starts = vec![[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]];
    let targets = vec![starts[1], starts[0], starts[3], starts[2]];
    ScenarioConfig {
        n_agents: 4,
        steps: 150,
        initial_positions: starts,
        target_positions: targets,
        ts: 0.2,
        a_max: 2.0,
        horizon: 3,
        q: diag4(5.0),
        r: [[2.0, 0.0], [0.0, 2.0]],
        beta: 1.5,
        pa: 1.0,
        po: [0.0, 0.0],
        cbf: CbfParams { r1: 0.5, r2: 0.25, gamma: 0.1, margin: DEFAULT_CBF_MARGIN },
        solver: SolverParams::default(),
        topology: TopologyConfig { kind: TopologyKind::FullyConnected, hub: 1, adjacency: Vec::new() },
        links: LinkConfig { delay_rounds: 0, drop_prob: 0.0, seed: 0 },
        arrival: ArrivalTolerance { position: 0.05, velocity: 0.05 },
        barrier_timeout_s: RoundBarrier::DEFAULT_TIMEOUT.as_secs_f64(),
    }
}

fn diag4(x: f64) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = x;
    }
    m
}

/// Parses a document on top of the benchmark defaults.
pub fn load_config(document: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = benchmark_position_swap();
    let entries = parse_document(document)?;
    let mut n_given = false;
    for (key, value) in &entries {
        n_given |= key == "mission.n_agents";
        cfg.set(key, value)?;
    }
    // infer the fleet size from the positions when only those were given
    if !n_given && cfg.initial_positions.len() != cfg.n_agents {
        cfg.n_agents = cfg.initial_positions.len();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key=value` overrides, then revalidates.
pub fn apply_overrides(cfg: &mut ScenarioConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for (i, item) in overrides.iter().enumerate() {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: item.clone() })?;
        cfg.set(key.trim(), &parse_value(raw.trim()))?;
    }
    cfg.validate()
}

fn parse_document(document: &str) -> Result<Vec<(String, Value)>, ConfigError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (idx, raw) in document.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: idx + 1, text: raw.to_string() })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: idx + 1, text: raw.to_string() });
        }
        if seen.insert(key.clone(), idx).is_some() {
            return Err(ConfigError::DuplicateKey { key });
        }
        out.push((key, parse_value(value.trim())));
    }
    Ok(out)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Renders a config so that `load_config(&export_config(c)) == c`.
pub fn export_config(cfg: &ScenarioConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for (key, _) in CONFIG_KEYS {
        let this = key.split('.').next().unwrap_or("");
        if this != section {
            if !section.is_empty() {
                out.push('\n');
            }
            section = this;
        }
        let value = cfg.get(key).expect("every listed key is readable");
        let text = match value {
            Value::String(s) => s,
            other => other.to_string(),
        };
        let _ = writeln!(out, "{key} = {text}");
    }
    out
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.to_string(), reason: reason.into() }
}

fn typed<T: for<'de> Deserialize<'de>>(key: &str, value: &Value) -> Result<T, ConfigError> {
    serde_json::from_value(value.clone()).map_err(|e| invalid(key, e.to_string()))
}

impl ScenarioConfig {
    pub fn get(&self, key: &str) -> Result<Value, ConfigError> {
        Ok(match key {
            "mission.n_agents" => json!(self.n_agents),
            "mission.steps" => json!(self.steps),
            "mission.initial_positions" => json!(self.initial_positions),
            "mission.target_positions" => json!(self.target_positions),
            "model.ts" => json!(self.ts),
            "model.a_max" => json!(self.a_max),
            "model.horizon" => json!(self.horizon),
            "cost.q" => json!(self.q),
            "cost.r" => json!(self.r),
            "cost.beta" => json!(self.beta),
            "cost.pa" => json!(self.pa),
            "cost.po" => json!(self.po),
            "cbf.r1" => json!(self.cbf.r1),
            "cbf.r2" => json!(self.cbf.r2),
            "cbf.gamma" => json!(self.cbf.gamma),
            "cbf.margin" => json!(self.cbf.margin),
            "solver.alpha_p" => json!(self.solver.alpha_p),
            "solver.alpha_d" => json!(self.solver.alpha_d),
            "solver.eps" => json!(self.solver.eps),
            "solver.p_max" => json!(self.solver.p_max),
            "solver.warm_start" => json!(self.solver.warm_start),
            "topology.kind" => Value::String(self.topology.kind.to_string()),
            "topology.hub" => json!(self.topology.hub),
            "topology.adjacency" => json!(self.topology.adjacency),
            "links.delay_rounds" => json!(self.links.delay_rounds),
            "links.drop_prob" => json!(self.links.drop_prob),
            "links.seed" => json!(self.links.seed),
            "arrival.position_tol" => json!(self.arrival.position),
            "arrival.velocity_tol" => json!(self.arrival.velocity),
            "runtime.barrier_timeout_s" => json!(self.barrier_timeout_s),
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        })
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        match key {
            "mission.n_agents" => self.n_agents = typed(key, v)?,
            "mission.steps" => self.steps = typed(key, v)?,
            "mission.initial_positions" => self.initial_positions = typed(key, v)?,
            "mission.target_positions" => self.target_positions = typed(key, v)?,
            "model.ts" => self.ts = typed(key, v)?,
            "model.a_max" => self.a_max = typed(key, v)?,
            "model.horizon" => self.horizon = typed(key, v)?,
            "cost.q" => self.q = typed(key, v)?,
            "cost.r" => self.r = typed(key, v)?,
            "cost.beta" => self.beta = typed(key, v)?,
            "cost.pa" => self.pa = typed(key, v)?,
            "cost.po" => self.po = typed(key, v)?,
            "cbf.r1" => self.cbf.r1 = typed(key, v)?,
            "cbf.r2" => self.cbf.r2 = typed(key, v)?,
            "cbf.gamma" => self.cbf.gamma = typed(key, v)?,
            "cbf.margin" => self.cbf.margin = typed(key, v)?,
            "solver.alpha_p" => self.solver.alpha_p = typed(key, v)?,
            "solver.alpha_d" => self.solver.alpha_d = typed(key, v)?,
            "solver.eps" => self.solver.eps = typed(key, v)?,
            "solver.p_max" => self.solver.p_max = typed(key, v)?,
            "solver.warm_start" => self.solver.warm_start = typed(key, v)?,
            "topology.kind" => {
                let s: String = typed(key, v)?;
                self.topology.kind = s.parse().map_err(|e: crate::comms::CommsError| invalid(key, e.to_string()))?;
            }
            "topology.hub" => self.topology.hub = typed(key, v)?,
            "topology.adjacency" => self.topology.adjacency = typed(key, v)?,
            "links.delay_rounds" => self.links.delay_rounds = typed(key, v)?,
            "links.drop_prob" => self.links.drop_prob = typed(key, v)?,
            "links.seed" => self.links.seed = typed(key, v)?,
            "arrival.position_tol" => self.arrival.position = typed(key, v)?,
            "arrival.velocity_tol" => self.arrival.velocity = typed(key, v)?,
            "runtime.barrier_timeout_s" => self.barrier_timeout_s = typed(key, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.n_agents;
        if n == 0 {
            return Err(invalid("mission.n_agents", "must be at least 1"));
        }
        if self.initial_positions.len() != n || self.target_positions.len() != n {
            return Err(ConfigError::Dimension(format!(
                "{n} agents but {} initial and {} target positions",
                self.initial_positions.len(),
                self.target_positions.len()
            )));
        }
        let finite = |xs: &[[f64; 2]]| xs.iter().flatten().all(|x| x.is_finite());
        if !finite(&self.initial_positions) || !finite(&self.target_positions) {
            return Err(invalid("mission.initial_positions", "positions must be finite"));
        }
        if self.horizon == 0 {
            return Err(invalid("model.horizon", "must be at least 1"));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(invalid("model.ts", "must be positive"));
        }
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return Err(invalid("model.a_max", "must be positive"));
        }
        let q = self.q_matrix();
        if q != q.transpose() || q.symmetric_eigenvalues().min() < -1e-12 {
            return Err(invalid("cost.q", "must be symmetric positive semidefinite"));
        }
        let r = self.r_matrix();
        if r != r.transpose() || r.symmetric_eigenvalues().min() <= 0.0 {
            return Err(invalid("cost.r", "must be symmetric positive definite"));
        }
        if !(self.beta > 0.0) {
            return Err(invalid("cost.beta", "must be positive"));
        }
        if !(self.pa >= 0.0) {
            return Err(invalid("cost.pa", "must be nonnegative"));
        }
        self.cbf.validate().map_err(|e| invalid("cbf", e.to_string()))?;
        self.solver.validate().map_err(|e| invalid("solver", e))?;
        if !(0.0..=1.0).contains(&self.links.drop_prob) {
            return Err(invalid("links.drop_prob", "must lie in [0, 1]"));
        }
        if !(self.arrival.position > 0.0 && self.arrival.velocity > 0.0) {
            return Err(invalid("arrival", "tolerances must be positive"));
        }
        if !(self.barrier_timeout_s > 0.0 && self.barrier_timeout_s.is_finite()) {
            return Err(invalid("runtime.barrier_timeout_s", "must be positive"));
        }
        self.build_topology()?;
        for (i, j) in all_pairs(n) {
            let dp = Vector2::from(self.initial_positions[i]) - Vector2::from(self.initial_positions[j]);
            let value = barrier_value(&dp, &self.cbf);
            if value < 0.0 {
                return Err(ConfigError::UnsafeStart { first: i + 1, second: j + 1, value });
            }
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.q[i][j])
    }

    pub fn r_matrix(&self) -> Matrix2<f64> {
        Matrix2::from_fn(|i, j| self.r[i][j])
    }

    pub fn model(&self) -> Result<AgentModel, ConfigError> {
        discretize(self.ts, self.a_max).map_err(|e| invalid("model", e.to_string()))
    }

    pub fn terminal_weight(&self) -> Result<Matrix4<f64>, ConfigError> {
        terminal_weight(&self.model()?, &self.q_matrix(), &self.r_matrix()).map_err(|e| invalid("cost", e.to_string()))
    }

    pub fn build_topology(&self) -> Result<Topology, ConfigError> {
        let n = self.n_agents;
        let t = match self.topology.kind {
            TopologyKind::FullyConnected => Topology::fully_connected(n),
            TopologyKind::Ring => Topology::ring(n),
            TopologyKind::Star => {
                if self.topology.hub == 0 || self.topology.hub > n {
                    return Err(invalid("topology.hub", format!("must be in 1..={n}")));
                }
                Topology::star(n, self.topology.hub - 1)
            }
            TopologyKind::Mesh => {
                let adj = self.topology.adjacency.iter().map(|row| row.iter().map(|&x| x != 0).collect()).collect();
                Topology::mesh(adj)
            }
        };
        t.map_err(|e| invalid("topology", e.to_string()))
    }

    pub fn link_model(&self) -> LinkModel {
        LinkModel::uniform(self.n_agents, self.links.delay_rounds, self.links.drop_prob, self.links.seed)
    }

    pub fn initial_states(&self) -> Vec<AgentState> {
        self.initial_positions.iter().map(|p| AgentState::at_rest(p[0], p[1])).collect()
    }

    pub fn targets(&self) -> Vec<Vector2<f64>> {
        self.target_positions.iter().map(|&p| Vector2::from(p)).collect()
    }

    pub fn barrier_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.barrier_timeout_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_values() {
        let b = benchmark_position_swap();
        assert_eq!(b.initial_positions, vec![[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(b.target_positions, vec![[0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!((b.ts, b.a_max, b.horizon, b.beta, b.pa), (0.2, 2.0, 3, 1.5, 1.0));
        assert_eq!((b.cbf.r1, b.cbf.r2, b.cbf.gamma), (0.5, 0.25, 0.1));
        assert_eq!(b.q, diag4(5.0));
        assert_eq!(b.topology.kind, TopologyKind::FullyConnected);
        b.validate().unwrap();
        let centroid = b.initial_positions.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        assert_eq!(centroid, [0.0, 0.0]);
    }

    #[test]
    fn initial_barriers_by_hand() {
        let b = benchmark_position_swap();
        let values: Vec<f64> = all_pairs(4)
            .into_iter()
            .map(|(i, j)| {
                barrier_value(
                    &(Vector2::from(b.initial_positions[i]) - Vector2::from(b.initial_positions[j])),
                    &b.cbf,
                )
            })
            .collect();
        // (1,2) and (3,4) are opposite pairs, the rest are adjacent
        assert_eq!(values, vec![7.0, 5.0, 5.0, 5.0, 5.0, 3.0]);
    }

    #[test]
    fn empty_document_is_benchmark() {
        assert_eq!(load_config("").unwrap(), benchmark_position_swap());
        assert_eq!(load_config("# only a comment\n\n").unwrap(), benchmark_position_swap());
    }

    #[test]
    fn round_trip() {
        let mut cfg = benchmark_position_swap();
        cfg.solver.alpha_p = 0.123456789012345;
        cfg.links.seed = u64::MAX;
        cfg.topology.kind = TopologyKind::Ring;
        assert_eq!(load_config(&export_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(load_config("foo.bar = 1"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(load_config("model.ts"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(load_config("model.ts = 1\nmodel.ts = 2"), Err(ConfigError::DuplicateKey { .. })));
        assert!(matches!(load_config("model.ts = \"fast\""), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(load_config("mission.n_agents = 3"), Err(ConfigError::Dimension(_))));
        assert!(matches!(load_config("topology.kind = hexagon"), Err(ConfigError::InvalidValue { .. })));
    }

    #[test]
    fn unsafe_start_names_pair() {
        let doc = "mission.initial_positions = [[0, 0], [0.1, 0]]\nmission.target_positions = [[1, 0], [-1, 0]]";
        let err = load_config(doc).unwrap_err();
        assert!(matches!(err, ConfigError::UnsafeStart { first: 1, second: 2, .. }));
        assert!(err.to_string().contains("agents 1 and 2"));
    }

    #[test]
    fn overrides_apply_after_load() {
        let mut cfg = load_config("links.seed = 3").unwrap();
        apply_overrides(&mut cfg, &["links.drop_prob=0.3".into(), "links.seed = 7".into()]).unwrap();
        assert_eq!((cfg.links.drop_prob, cfg.links.seed), (0.3, 7));
        assert!(apply_overrides(&mut cfg, &["nope=1".into()]).is_err());
        assert!(apply_overrides(&mut cfg, &["links.drop_prob=2".into()]).is_err());
    }

    #[test]
    fn every_key_readable_and_writable() {
        let mut cfg = benchmark_position_swap();
        for (key, _) in CONFIG_KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, benchmark_position_swap());
    }

    #[test]
    fn topologies_from_config() {
        let cfg = load_config("topology.kind = star\ntopology.hub = 2").unwrap();
        assert_eq!(cfg.build_topology().unwrap().degree(1), 3);
        let mesh = "topology.kind = mesh\ntopology.adjacency = [[0,1,0,0],[1,0,1,0],[0,1,0,1],[0,0,1,0]]";
        assert_eq!(load_config(mesh).unwrap().build_topology().unwrap().diameter(), 3);
        assert!(load_config("topology.kind = mesh").is_err());
    }
}
