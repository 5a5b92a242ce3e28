//! Distributed primal-dual equilibrium seeking with gradient tracking.
//!
//! Each agent keeps its own decision `u`, a tracker `s` of the fleet-average
//! aggregate, a tracker `y` of the fleet-average coupled-constraint value and
//! a dual estimate `lambda`. One inner round is:
//!
//! 1. exchange `(s, y, lambda)` with neighbours,
//! 2. `u+ = proj(u - alpha_p (grad J(u, s) + A' lambda))`,
//! 3. `s+ = sum_j w_ij s_j + phi(u+) - phi(u)` and likewise for `y` with `g`,
//! 4. `lambda+ = max(0, sum_j w_ij lambda_j + alpha_d N y+)`.
//!
//! Termination is decided without a coordinator: local convergence flags are
//! flooded through the graph in the message header, so after `diameter` more
//! rounds every agent knows whether the whole fleet had converged, and all
//! agents stop on the same round.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{Channel, CommsError, Endpoint, Wire};
use crate::game::{project_box, AggregateEstimate, HorizonDecision, LocalGame};
use crate::model::{ErrorState, ModelError};
use crate::safety::CoupledConstraintBlock;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("consensus weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Comms(#[from] CommsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub alpha_p: f64,
    pub alpha_d: f64,
    pub eps: f64,
    pub p_max: usize,
    pub warm_start: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { alpha_p: 0.05, alpha_d: 10.0, eps: 1e-3, p_max: 2000, warm_start: true }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha_p > 0.0 && self.alpha_p.is_finite()) {
            return Err(format!("solver.alpha_p must be positive, got {}", self.alpha_p));
        }
        if !(self.alpha_d > 0.0 && self.alpha_d.is_finite()) {
            return Err(format!("solver.alpha_d must be positive, got {}", self.alpha_d));
        }
        if !(self.eps > 0.0) {
            return Err(format!("solver.eps must be positive, got {}", self.eps));
        }
        if self.p_max == 0 {
            return Err("solver.p_max must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverLocalState {
    pub u: HorizonDecision,
    /// Tracker of the fleet-average aggregate.
    pub s: DVector<f64>,
    /// Tracker of the fleet-average constraint value.
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iter: usize,
    pub converged_local: bool,
    /// `flood[d]`: every agent within distance `d` was converged `d` rounds ago.
    pub flood: Vec<bool>,
}

/// Agent-local data for one receding-horizon step.
#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    pub game: &'a LocalGame,
    pub e0: ErrorState,
    pub target: Vector2<f64>,
    pub block: &'a CoupledConstraintBlock,
    pub a_max: f64,
    pub n: usize,
}

impl LocalProblem<'_> {
    pub fn phi(&self, u: &DVector<f64>) -> DVector<f64> {
        let p = self.game.phi(&self.e0, u, &self.target);
        DVector::from_column_slice(p.as_slice())
    }

    pub fn g(&self, u: &DVector<f64>) -> DVector<f64> {
        self.block.value(u)
    }
}

/// Consensus row of one agent: `(self weight, [(neighbour, weight)])`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub own: f64,
    pub neighbours: Vec<(usize, f64)>,
}

impl WeightRow {
    pub fn from_matrix(w: &crate::comms::WeightMatrix, me: usize, neighbours: &[usize]) -> Self {
        Self { own: w.get(me, me), neighbours: neighbours.iter().map(|&j| (j, w.get(me, j))).collect() }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let sum = self.own + self.neighbours.iter().map(|(_, w)| w).sum::<f64>();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SolverError::WeightSum(sum));
        }
        Ok(())
    }

    fn weight_of(&self, j: usize) -> f64 {
        self.neighbours.iter().find(|(k, _)| *k == j).map_or(0.0, |(_, w)| *w)
    }

    /// `own * mine + sum_j w_j * theirs_j`, with `theirs` keyed by sender.
    fn mix<'v>(&self, mine: &DVector<f64>, theirs: impl Iterator<Item = (usize, &'v DVector<f64>)>) -> DVector<f64> {
        let mut out = mine * self.own;
        for (j, v) in theirs {
            out.axpy(self.weight_of(j), v, 1.0);
        }
        out
    }
}

pub fn init_local(
    problem: &LocalProblem<'_>,
    u_prev: Option<&HorizonDecision>,
    diameter: usize,
) -> Result<SolverLocalState, SolverError> {
    let len = 2 * problem.game.horizon();
    if problem.block.a.ncols() != len {
        return Err(SolverError::Dimension(format!(
            "constraint block has {} columns, decision has {len}",
            problem.block.a.ncols()
        )));
    }
    let u = match u_prev {
        Some(prev) if prev.0.len() == len => project_box(&prev.shifted().0, problem.a_max),
        Some(prev) => {
            return Err(SolverError::Dimension(format!("warm start has {} entries, expected {len}", prev.0.len())))
        }
        None => HorizonDecision::zeros(problem.game.horizon()),
    };
    Ok(SolverLocalState {
        s: problem.phi(&u.0),
        y: problem.g(&u.0),
        lambda: DVector::zeros(problem.block.rows()),
        u,
        iter: 0,
        converged_local: false,
        flood: vec![false; diameter + 1],
    })
}

/// Projected pseudo-gradient step with the local dual correction.
pub fn primal_step(
    state: &SolverLocalState,
    problem: &LocalProblem<'_>,
    params: &SolverParams,
) -> Result<HorizonDecision, SolverError> {
    let sigma = AggregateEstimate(Vector2::new(state.s[0], state.s[1]));
    let mut grad = problem.game.pseudo_gradient(&problem.e0, &state.u.0, &sigma)?;
    if problem.block.rows() > 0 {
        grad += problem.block.a.tr_mul(&state.lambda);
    }
    Ok(project_box(&(&state.u.0 - grad * params.alpha_p), problem.a_max))
}

/// Dynamic average consensus update `t+ = sum_j w_ij t_j + (new - old)`.
pub fn tracker_update<'v>(
    tracker: &DVector<f64>,
    local_old: &DVector<f64>,
    local_new: &DVector<f64>,
    neighbours: impl Iterator<Item = (usize, &'v DVector<f64>)>,
    weights: &WeightRow,
) -> Result<DVector<f64>, SolverError> {
    weights.validate()?;
    let mut out = weights.mix(tracker, neighbours);
    out += local_new;
    out -= local_old;
    Ok(out)
}

/// `lambda+ = max(0, sum_j w_ij lambda_j + alpha_d N y+)`.
pub fn dual_step<'v>(
    lambda: &DVector<f64>,
    y_new: &DVector<f64>,
    neighbours: impl Iterator<Item = (usize, &'v DVector<f64>)>,
    weights: &WeightRow,
    params: &SolverParams,
    n: usize,
) -> Result<DVector<f64>, SolverError> {
    weights.validate()?;
    let mut out = weights.mix(lambda, neighbours);
    out.axpy(params.alpha_d * n as f64, y_new, 1.0);
    Ok(out.map(|x| x.max(0.0)))
}

pub fn check_stop(u_diff: f64, lambda_diff: f64, eps: f64) -> bool {
    u_diff.max(lambda_diff) < eps
}

fn inf_norm_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        (a - b).amax()
    }
}

/// Algorithm data exchanged every inner round.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerPayload {
    pub s: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl Wire for TrackerPayload {
    fn wire_bytes(&self) -> usize {
        8 * (self.s.len() + self.y.len() + self.lambda.len())
    }
}

/// Channel carrying inner-loop rounds: header is the convergence flood window.
pub type SolverChannel = Channel<Vec<bool>, TrackerPayload>;

/// Snapshot after one inner round, for instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub agent: usize,
    pub round: usize,
    pub s: DVector<f64>,
    pub y: DVector<f64>,
    pub phi: DVector<f64>,
    pub g: DVector<f64>,
    pub lambda: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub decision: HorizonDecision,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl InnerOutcome {
    /// Control applied to the plant, `u[0]`.
    pub fn first_control(&self) -> Vector2<f64> {
        self.decision.step(0)
    }
}

/// Network access for one inner solve.
pub struct SolverNet<'a> {
    pub endpoint: &'a mut Endpoint,
    pub channel: &'a SolverChannel,
    pub session: u64,
    pub weights: &'a WeightRow,
    pub observer: Option<&'a mut dyn FnMut(&RoundTrace)>,
}

/// Seam for the distributed inner algorithm.
pub trait InnerSolver: Send {
    fn solve(
        &mut self,
        problem: &LocalProblem<'_>,
        warm: Option<&HorizonDecision>,
        net: SolverNet<'_>,
    ) -> Result<InnerOutcome, SolverError>;
}

/// Gradient-tracking primal-dual scheme described in the module docs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientTracking {
    pub params: SolverParams,
}

impl InnerSolver for GradientTracking {
    fn solve(
        &mut self,
        problem: &LocalProblem<'_>,
        warm: Option<&HorizonDecision>,
        net: SolverNet<'_>,
    ) -> Result<InnerOutcome, SolverError> {
        inner_loop(problem, &self.params, warm, net)
    }
}

pub fn inner_loop(
    problem: &LocalProblem<'_>,
    params: &SolverParams,
    warm: Option<&HorizonDecision>,
    net: SolverNet<'_>,
) -> Result<InnerOutcome, SolverError> {
    let SolverNet { endpoint, channel, session, weights, mut observer } = net;
    weights.validate()?;
    let diameter = endpoint.diameter();
    let warm = if params.warm_start { warm } else { None };
    let mut st = init_local(problem, warm, diameter)?;
    let mut phi_old = st.s.clone();
    let mut g_old = st.y.clone();
    let mut link = endpoint.open_session::<TrackerPayload>(channel.id(), session);

    while st.iter < params.p_max {
        let payload = TrackerPayload { s: st.s.clone(), y: st.y.clone(), lambda: st.lambda.clone() };
        let inbox = endpoint.exchange(channel, &mut link, st.flood.clone(), payload)?;

        let u_new = primal_step(&st, problem, params)?;
        let phi_new = problem.phi(&u_new.0);
        let g_new = problem.g(&u_new.0);
        let s_new = tracker_update(&st.s, &phi_old, &phi_new, inbox.iter().map(|m| (m.from, &m.payload.s)), weights)?;
        let y_new = tracker_update(&st.y, &g_old, &g_new, inbox.iter().map(|m| (m.from, &m.payload.y)), weights)?;
        let lambda_new = dual_step(
            &st.lambda,
            &y_new,
            inbox.iter().map(|m| (m.from, &m.payload.lambda)),
            weights,
            params,
            problem.n,
        )?;

        let u_diff = inf_norm_diff(&u_new.0, &st.u.0);
        let lambda_diff = inf_norm_diff(&lambda_new, &st.lambda);
        st.converged_local = check_stop(u_diff, lambda_diff, params.eps);

        let mut flood = vec![false; diameter + 1];
        flood[0] = st.converged_local;
        for d in 1..=diameter {
            flood[d] = st.flood[d - 1] && inbox.iter().all(|m| m.header.get(d - 1).copied().unwrap_or(false));
        }

        st.u = u_new;
        st.s = s_new;
        st.y = y_new;
        st.lambda = lambda_new;
        st.flood = flood;
        st.iter += 1;
        phi_old = phi_new;
        g_old = g_new;

        if let Some(obs) = observer.as_deref_mut() {
            obs(&RoundTrace {
                agent: endpoint.id(),
                round: st.iter,
                s: st.s.clone(),
                y: st.y.clone(),
                phi: phi_old.clone(),
                g: g_old.clone(),
                lambda: st.lambda.clone(),
                u: st.u.0.clone(),
            });
        }

        if st.flood[diameter] {
            return Ok(InnerOutcome { decision: st.u, lambda: st.lambda, iterations: st.iter, converged: true });
        }
    }
    log::debug!("agent {} hit the inner-iteration cap ({})", endpoint.id() + 1, params.p_max);
    Ok(InnerOutcome { decision: st.u, lambda: st.lambda, iterations: st.iter, converged: false })
}
