//! Trajectory and timing logs and their CSV form.

use std::io::{Read, Write};
use std::sync::Mutex;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::safety::{all_pairs, barrier_value, decrement_satisfied, CbfParams};

/// One agent at one receding-horizon step. The control is the one applied
/// from this state; the final row of a run carries a zero control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    /// 1-based agent id.
    pub agent: usize,
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub min_barrier: f64,
    pub inner_iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub agent: usize,
    pub seconds: f64,
    pub inner_iters: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingLog {
    pub records: Vec<TimingRecord>,
}

/// Append-only sink shared by the workers. Rows are sorted by (step, agent)
/// when taken, so arrival order does not matter.
#[derive(Debug, Default)]
pub struct MissionLogger {
    trajectory: Mutex<Vec<TrajectoryRecord>>,
    timing: Mutex<Vec<TimingRecord>>,
}

impl MissionLogger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trajectory(&self, rec: TrajectoryRecord) {
        self.trajectory.lock().unwrap_or_else(|e| e.into_inner()).push(rec);
    }

    pub fn timing(&self, rec: TimingRecord) {
        self.timing.lock().unwrap_or_else(|e| e.into_inner()).push(rec);
    }

    pub fn take(&self) -> (TrajectoryLog, TimingLog) {
        let mut traj = std::mem::take(&mut *self.trajectory.lock().unwrap_or_else(|e| e.into_inner()));
        let mut timing = std::mem::take(&mut *self.timing.lock().unwrap_or_else(|e| e.into_inner()));
        traj.sort_by_key(|r| (r.step, r.agent));
        timing.sort_by_key(|r| (r.step, r.agent));
        (TrajectoryLog { records: traj }, TimingLog { records: timing })
    }
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub const TRAJECTORY_HEADER: &str = "step,agent,px,py,vx,vy,ax,ay,min_barrier,inner_iters,converged";
pub const TIMING_HEADER: &str = "step,agent,seconds,inner_iters";

impl TrajectoryLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        if self.records.is_empty() {
            let mut out = out;
            writeln!(out, "{TRAJECTORY_HEADER}")?;
            return Ok(());
        }
        write_rows(&self.records, out)
    }

    pub fn read_csv<R: Read>(input: R) -> csv::Result<Self> {
        Ok(Self { records: read_rows(input)? })
    }

    pub fn agents(&self) -> usize {
        self.records.iter().map(|r| r.agent).max().unwrap_or(0)
    }

    pub fn last_step(&self) -> Option<u64> {
        self.records.iter().map(|r| r.step).max()
    }

    /// Positions of every agent at each logged step, indexed `[step][agent]`.
    pub fn positions_by_step(&self) -> Vec<Vec<Vector2<f64>>> {
        let n = self.agents();
        let steps = self.last_step().map_or(0, |s| s as usize + 1);
        let mut out = vec![vec![Vector2::new(f64::NAN, f64::NAN); n]; steps];
        for r in &self.records {
            out[r.step as usize][r.agent - 1] = Vector2::new(r.px, r.py);
        }
        out
    }

    /// Polyline of one agent (1-based id).
    pub fn polyline(&self, agent: usize) -> Vec<Vector2<f64>> {
        self.records.iter().filter(|r| r.agent == agent).map(|r| Vector2::new(r.px, r.py)).collect()
    }

    pub fn any_unconverged(&self) -> bool {
        self.records.iter().any(|r| !r.converged)
    }
}

impl TimingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        if self.records.is_empty() {
            let mut out = out;
            writeln!(out, "{TIMING_HEADER}")?;
            return Ok(());
        }
        write_rows(&self.records, out)
    }

    pub fn read_csv<R: Read>(input: R) -> csv::Result<Self> {
        Ok(Self { records: read_rows(input)? })
    }

    pub fn seconds(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.seconds).collect()
    }
}

/// Replay of a trajectory against the barrier conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyAudit {
    pub min_barrier: f64,
    /// Pair (1-based) and step where the minimum occurred.
    pub argmin: Option<((usize, usize), u64)>,
    pub checks: usize,
    /// Steps where some pair had `h < 0`.
    pub violations: Vec<((usize, usize), u64, f64)>,
    /// Steps where the decrement condition failed, with the solver flag of that step.
    pub decrement_failures: Vec<((usize, usize), u64, bool)>,
}

impl SafetyAudit {
    pub fn safe(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn audit_trajectory(log: &TrajectoryLog, params: &CbfParams) -> SafetyAudit {
    let pos = log.positions_by_step();
    let n = log.agents();
    let converged_at = |step: u64| log.records.iter().filter(|r| r.step == step).all(|r| r.converged);
    let mut audit = SafetyAudit {
        min_barrier: f64::INFINITY,
        argmin: None,
        checks: 0,
        violations: Vec::new(),
        decrement_failures: Vec::new(),
    };
    for (k, snap) in pos.iter().enumerate() {
        for (i, j) in all_pairs(n) {
            let h = barrier_value(&(snap[i] - snap[j]), params);
            audit.checks += 1;
            if h < audit.min_barrier {
                audit.min_barrier = h;
                audit.argmin = Some(((i + 1, j + 1), k as u64));
            }
            if h < 0.0 {
                audit.violations.push(((i + 1, j + 1), k as u64, h));
            }
            if let Some(next) = pos.get(k + 1) {
                let h_next = barrier_value(&(next[i] - next[j]), params);
                if !decrement_satisfied(h_next, h, params.gamma) {
                    audit.decrement_failures.push(((i + 1, j + 1), k as u64, converged_at(k as u64)));
                }
            }
        }
    }
    audit
}
