//! SPMD mission runner: one long-lived worker thread per agent, all talking
//! through the comms fabric in barrier-synchronised rounds.
//!
//! Each receding-horizon step a worker
//! 1. floods its table of last known agent states for `diameter` rounds,
//!    AND-ing everybody's arrival flag in the message header,
//! 2. assembles its constraint block and runs the inner solver (timed),
//! 3. applies `u[0]` to its plant and logs.
//!
//! Workers own their context; the only shared mutable things are the fabric
//! and the append-only logger.

mod barrier;

pub use barrier::{BarrierError, RoundBarrier};

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector4};
use thiserror::Error;

use crate::comms::{metropolis_weights, Channel, CommsError, Endpoint, Fabric, MessageRecord, Wire};
use crate::game::{CostParams, HorizonDecision, LocalGame};
use crate::model::{to_error, AgentModel, AgentState, ModelError, Prediction};
use crate::safety::{assemble_local_block, barrier_value, CbfParams, SafetyError};
use crate::scenario::{MissionLogger, ScenarioConfig, TimingLog, TimingRecord, TrajectoryLog, TrajectoryRecord};
use crate::solver::{inner_loop, LocalProblem, RoundTrace, SolverChannel, SolverError, SolverNet, WeightRow};

const STATE_CHANNEL: u64 = 1;
const SOLVER_CHANNEL: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ExitStatus {
    Success,
    /// Some worker failed for a reason other than a barrier timeout.
    Failure,
    SolverCapExhausted,
    BarrierTimeout,
    ConfigError,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Failure => 1,
            ExitStatus::SolverCapExhausted => 2,
            ExitStatus::BarrierTimeout => 3,
            ExitStatus::ConfigError => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitStatus::Success => "success",
            ExitStatus::Failure => "failure",
            ExitStatus::SolverCapExhausted => "solver_cap_exhausted",
            ExitStatus::BarrierTimeout => "barrier_timeout",
            ExitStatus::ConfigError => "config_error",
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("worker panicked: {0}")]
    Panic(String),
}

impl WorkerError {
    fn barrier(&self) -> Option<&BarrierError> {
        match self {
            WorkerError::Comms(CommsError::Barrier(b)) | WorkerError::Solver(SolverError::Comms(CommsError::Barrier(b))) => {
                Some(b)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("plant failure: {0}")]
pub struct PlantError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantTag {
    SimpleModel,
    External,
}

/// Where controls go and measured states come from.
pub trait Plant: Send {
    fn tag(&self) -> PlantTag;
    fn step(&mut self, state: &AgentState, control: &Vector2<f64>, ts: f64) -> Result<AgentState, PlantError>;
}

/// The nominal discrete model itself.
#[derive(Debug, Clone)]
pub struct SimpleModelPlant {
    model: AgentModel,
}

impl SimpleModelPlant {
    pub fn new(model: AgentModel) -> Self {
        Self { model }
    }
}

impl Plant for SimpleModelPlant {
    fn tag(&self) -> PlantTag {
        PlantTag::SimpleModel
    }

    fn step(&mut self, state: &AgentState, control: &Vector2<f64>, ts: f64) -> Result<AgentState, PlantError> {
        if ts != self.model.ts {
            return Err(PlantError(format!("plant built for ts={} was stepped with ts={ts}", self.model.ts)));
        }
        self.model.step(state, control).map_err(|e| PlantError(e.to_string()))
    }
}

/// Stand-in for an external plant. It records every command and reports the
/// state it was given, advanced only in its step counter.
#[derive(Debug, Clone, Default)]
pub struct LoopbackPlant {
    pub commands: Vec<Vector2<f64>>,
}

impl Plant for LoopbackPlant {
    fn tag(&self) -> PlantTag {
        PlantTag::External
    }

    fn step(&mut self, state: &AgentState, control: &Vector2<f64>, _ts: f64) -> Result<AgentState, PlantError> {
        self.commands.push(*control);
        Ok(AgentState { k: state.k + 1, ..*state })
    }
}

pub type PlantFactory = Box<dyn Fn(usize, &AgentModel) -> Box<dyn Plant> + Send + Sync>;

/// Called after every inner round with the MPC step and the round snapshot.
pub type TraceHook = Arc<dyn Fn(u64, &RoundTrace) + Send + Sync>;

#[derive(Default)]
pub struct MissionOptions {
    /// Defaults to [`SimpleModelPlant`].
    pub plant: Option<PlantFactory>,
    pub trace: Option<TraceHook>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub agent: usize,
    pub step: u64,
    pub duration: Duration,
    pub inner_iters: usize,
}

/// Runs `phase` and measures its wall time on the monotonic clock.
pub fn time_step<T>(phase: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = phase();
    (out, start.elapsed())
}

#[derive(Debug)]
pub struct MissionReport {
    pub trajectory: TrajectoryLog,
    pub timing: TimingLog,
    pub messages: Vec<MessageRecord>,
    pub status: ExitStatus,
    pub failure: Option<String>,
    /// Number of steps at which a control was applied.
    pub steps_run: u64,
    pub all_arrived: bool,
}

/// Last known state of every agent, stamped with the step it belongs to.
#[derive(Debug, Clone, PartialEq)]
struct StateTable(Vec<(u64, Vector4<f64>)>);

impl Wire for StateTable {
    fn wire_bytes(&self) -> usize {
        40 * self.0.len()
    }
}

impl StateTable {
    fn merge(&mut self, other: &StateTable) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if theirs.0 > mine.0 {
                *mine = *theirs;
            }
        }
    }

    fn states(&self) -> Vec<AgentState> {
        self.0
            .iter()
            .map(|(k, z)| AgentState { p: Vector2::new(z[0], z[1]), v: Vector2::new(z[2], z[3]), k: *k })
            .collect()
    }
}

type StateChannel = Channel<bool, StateTable>;

/// Read-only scenario knowledge plus the shared fabric and logger.
struct Shared<'a> {
    cfg: &'a ScenarioConfig,
    model: AgentModel,
    prediction: Prediction,
    cost: CostParams,
    targets: Vec<Vector2<f64>>,
    initial: Vec<AgentState>,
    fabric: Arc<Fabric>,
    state_channel: Arc<StateChannel>,
    solver_channel: Arc<SolverChannel>,
    logger: MissionLogger,
    trace: Option<TraceHook>,
}

/// Everything one worker owns.
pub struct WorkerContext {
    /// 0-based index; logs use `id + 1`.
    pub id: usize,
    pub model: AgentModel,
    pub state: AgentState,
    pub target: Vector2<f64>,
    pub game: LocalGame,
    pub weights: WeightRow,
    pub endpoint: Endpoint,
    pub plant: Box<dyn Plant>,
    pub warm: Option<HorizonDecision>,
}

#[derive(Debug, Default)]
struct WorkerSummary {
    steps_run: u64,
    arrived: bool,
    cap_hit: bool,
}

fn arrived(state: &AgentState, target: &Vector2<f64>, cfg: &ScenarioConfig) -> bool {
    (state.p - target).norm() <= cfg.arrival.position && state.v.norm() <= cfg.arrival.velocity
}

fn local_min_barrier(me: usize, states: &[AgentState], params: &CbfParams) -> f64 {
    states
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != me)
        .map(|(_, s)| barrier_value(&(states[me].p - s.p), params))
        .fold(f64::INFINITY, f64::min)
}

fn run_worker(ctx: &mut WorkerContext, shared: &Shared<'_>) -> Result<WorkerSummary, WorkerError> {
    let cfg = shared.cfg;
    let me = ctx.id;
    let diameter = ctx.endpoint.diameter();
    let mut table = StateTable(shared.initial.iter().map(|s| (0, s.as_vector())).collect());
    let mut state_link = ctx.endpoint.open_session::<StateTable>(STATE_CHANNEL, 0);
    let mut summary = WorkerSummary::default();

    for k in 0..=cfg.steps as u64 {
        if !ctx.state.is_finite() {
            return Err(ModelError::NonFinite("measured state").into());
        }
        table.0[me] = (k, ctx.state.as_vector());
        let mut all_arrived = arrived(&ctx.state, &ctx.target, cfg);
        for _ in 0..diameter {
            let inbox = ctx.endpoint.exchange(&shared.state_channel, &mut state_link, all_arrived, table.clone())?;
            for m in &inbox {
                all_arrived &= m.header;
                table.merge(&m.payload);
            }
        }
        let states = table.states();
        let min_barrier = local_min_barrier(me, &states, &cfg.cbf);
        let mut record = TrajectoryRecord {
            step: k,
            agent: me + 1,
            px: ctx.state.p.x,
            py: ctx.state.p.y,
            vx: ctx.state.v.x,
            vy: ctx.state.v.y,
            ax: 0.0,
            ay: 0.0,
            min_barrier,
            inner_iters: 0,
            converged: true,
        };
        if all_arrived || k == cfg.steps as u64 {
            shared.logger.trajectory(record);
            summary.arrived = all_arrived;
            break;
        }

        let e0 = to_error(&ctx.state, &ctx.target);
        let mut observer = shared.trace.as_ref().map(|hook| move |t: &RoundTrace| hook(k, t));
        let (outcome, elapsed) = time_step(|| -> Result<_, WorkerError> {
            let block = assemble_local_block(me, &states, &shared.targets, &shared.prediction, &cfg.cbf)?;
            let problem = LocalProblem {
                game: &ctx.game,
                e0,
                target: ctx.target,
                block: &block,
                a_max: cfg.a_max,
                n: cfg.n_agents,
            };
            let net = SolverNet {
                endpoint: &mut ctx.endpoint,
                channel: &shared.solver_channel,
                session: k,
                weights: &ctx.weights,
                observer: observer.as_mut().map(|o| o as &mut dyn FnMut(&RoundTrace)),
            };
            Ok(inner_loop(&problem, &cfg.solver, ctx.warm.as_ref(), net)?)
        });
        let outcome = outcome?;

        let u0 = outcome.first_control();
        let next = ctx.plant.step(&ctx.state, &u0, cfg.ts)?;
        record.ax = u0.x;
        record.ay = u0.y;
        record.inner_iters = outcome.iterations;
        record.converged = outcome.converged;
        shared.logger.trajectory(record);
        shared.logger.timing(TimingRecord {
            step: k,
            agent: me + 1,
            seconds: elapsed.as_secs_f64(),
            inner_iters: outcome.iterations,
        });
        summary.cap_hit |= !outcome.converged;
        summary.steps_run = k + 1;
        ctx.state = next;
        ctx.warm = Some(outcome.decision);
    }
    Ok(summary)
}

/// Aborts the fabric barrier if the owning worker unwinds.
struct AbortOnPanic<'a>(&'a Fabric);

impl Drop for AbortOnPanic<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.barrier().abort("a worker panicked");
        }
    }
}

pub fn run_mission(cfg: &ScenarioConfig) -> MissionReport {
    run_mission_with(cfg, MissionOptions::default())
}

fn config_failure(msg: String) -> MissionReport {
    MissionReport {
        trajectory: TrajectoryLog::default(),
        timing: TimingLog::default(),
        messages: Vec::new(),
        status: ExitStatus::ConfigError,
        failure: Some(msg),
        steps_run: 0,
        all_arrived: false,
    }
}

pub fn run_mission_with(cfg: &ScenarioConfig, options: MissionOptions) -> MissionReport {
    if let Err(e) = cfg.validate() {
        return config_failure(e.to_string());
    }
    let setup = || -> Result<_, String> {
        let model = cfg.model().map_err(|e| e.to_string())?;
        let p = cfg.terminal_weight().map_err(|e| e.to_string())?;
        let topology = cfg.build_topology().map_err(|e| e.to_string())?;
        let fabric = Fabric::new(topology, cfg.link_model(), cfg.barrier_timeout()).map_err(|e| e.to_string())?;
        Ok((model, p, fabric))
    };
    let (model, p, fabric) = match setup() {
        Ok(x) => x,
        Err(msg) => return config_failure(msg),
    };
    let n = cfg.n_agents;
    let cost = CostParams {
        q: cfg.q_matrix(),
        r: cfg.r_matrix(),
        p,
        beta: cfg.beta,
        pa: cfg.pa,
        po: Vector2::from(cfg.po),
        n,
    };
    let shared = Shared {
        cfg,
        prediction: model.prediction(cfg.horizon),
        model,
        cost,
        targets: cfg.targets(),
        initial: cfg.initial_states(),
        state_channel: Channel::new(STATE_CHANNEL, n),
        solver_channel: Channel::new(SOLVER_CHANNEL, n),
        fabric,
        logger: MissionLogger::new(),
        trace: options.trace,
    };
    let weights = metropolis_weights(shared.fabric.topology());
    let mut contexts: Vec<WorkerContext> = (0..n)
        .map(|i| {
            let endpoint = shared.fabric.endpoint(i);
            WorkerContext {
                id: i,
                model: shared.model.clone(),
                state: shared.initial[i],
                target: shared.targets[i],
                game: LocalGame::new(&shared.model, cfg.horizon, shared.cost.clone()),
                weights: WeightRow::from_matrix(&weights, i, endpoint.neighbours()),
                plant: match &options.plant {
                    Some(f) => f(i, &shared.model),
                    None => Box::new(SimpleModelPlant::new(shared.model.clone())),
                },
                endpoint,
                warm: None,
            }
        })
        .collect();

    let results: Vec<Result<WorkerSummary, WorkerError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = contexts
            .iter_mut()
            .map(|ctx| {
                let shared = &shared;
                std::thread::Builder::new()
                    .name(format!("agent-{}", ctx.id + 1))
                    .spawn_scoped(scope, move || {
                        let _guard = AbortOnPanic(&shared.fabric);
                        let out = run_worker(ctx, shared);
                        if let Err(e) = &out {
                            if e.barrier().is_none() {
                                shared.fabric.barrier().abort(format!("agent {}: {e}", ctx.id + 1));
                            }
                        }
                        out
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".into());
                    Err(WorkerError::Panic(msg))
                })
            })
            .collect()
    });

    let (trajectory, timing) = shared.logger.take();
    let messages = shared.fabric.message_log();
    let mut report = MissionReport {
        trajectory,
        timing,
        messages,
        status: ExitStatus::Success,
        failure: None,
        steps_run: 0,
        all_arrived: false,
    };
    let errors: Vec<&WorkerError> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    if !errors.is_empty() {
        let timeout = errors.iter().any(|e| matches!(e.barrier(), Some(BarrierError::Timeout { .. })));
        report.status = if timeout { ExitStatus::BarrierTimeout } else { ExitStatus::Failure };
        // prefer the root cause over the aborts it triggered
        let root = errors
            .iter()
            .find(|e| !matches!(e.barrier(), Some(BarrierError::Aborted(_))))
            .unwrap_or(&errors[0]);
        report.failure = Some(root.to_string());
        log::error!("mission aborted: {root}");
        return report;
    }
    let summaries: Vec<WorkerSummary> = results.into_iter().filter_map(Result::ok).collect();
    report.steps_run = summaries.iter().map(|s| s.steps_run).max().unwrap_or(0);
    report.all_arrived = summaries.iter().all(|s| s.arrived);
    if summaries.iter().any(|s| s.cap_hit) {
        report.status = ExitStatus::SolverCapExhausted;
    }
    report
}
