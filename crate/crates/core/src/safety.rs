//! Norm-1 discrete-time exponential barrier functions and their conversion
//! into per-agent linear constraint blocks over the prediction horizon.
//!
//! The barrier `h(dp) = |dp_x|/r1 + |dp_y|/r2 - 1` is made affine by fixing the
//! sign of each absolute value from the measured relative position at the
//! start of the receding-horizon step. With the signs fixed the decrement
//! condition `h[k+1] >= (1 - gamma) h[k]` becomes one linear row in
//! `(u_i, u_j)` per horizon step.

use nalgebra::{DMatrix, DVector, RowDVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentState, ErrorState, Prediction};

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("barrier radii must be positive (r1={r1}, r2={r2})")]
    InvalidRadius { r1: f64, r2: f64 },
    #[error("decrement rate must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("constraint margin must be finite and nonnegative, got {0}")]
    InvalidMargin(f64),
    #[error("prediction horizon {prediction} does not match requested horizon {requested}")]
    HorizonMismatch { prediction: usize, requested: usize },
    #[error("pair rows are inconsistent: {0}")]
    InconsistentRows(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfParams {
    pub r1: f64,
    pub r2: f64,
    pub gamma: f64,
    /// Extra slack demanded of every decrement row, in barrier units. A
    /// first-order solver stops slightly infeasible; this keeps the stopped
    /// iterate on the safe side.
    #[serde(default)]
    pub margin: f64,
}

impl CbfParams {
    pub fn new(r1: f64, r2: f64, gamma: f64) -> Result<Self, SafetyError> {
        let p = Self { r1, r2, gamma, margin: 0.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.r1 > 0.0 && self.r2 > 0.0 && self.r1.is_finite() && self.r2.is_finite()) {
            return Err(SafetyError::InvalidRadius { r1: self.r1, r2: self.r2 });
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SafetyError::InvalidGamma(self.gamma));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(SafetyError::InvalidMargin(self.margin));
        }
        Ok(())
    }

    pub fn with_margin(self, margin: f64) -> Self {
        Self { margin, ..self }
    }
}

/// Branch of each absolute value in the barrier for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrthantSigns {
    pub sx: i8,
    pub sy: i8,
}

impl OrthantSigns {
    fn coefficients(&self, params: &CbfParams) -> Vector2<f64> {
        Vector2::new(f64::from(self.sx) / params.r1, f64::from(self.sy) / params.r2)
    }
}

/// Pair `(i, j)` with `i < j`, zero-based.
pub type Pair = (usize, usize);

/// Label for one constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    pub pair: Pair,
    pub step: usize,
}

/// Post-hoc barrier evaluation for one pair at one time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeSetCheck {
    pub pair: Pair,
    pub k: u64,
    pub value: f64,
}

pub fn barrier_value(dp: &Vector2<f64>, params: &CbfParams) -> f64 {
    dp.x.abs() / params.r1 + dp.y.abs() / params.r2 - 1.0
}

pub fn decrement_satisfied(h_next: f64, h_now: f64, gamma: f64) -> bool {
    h_next - h_now >= -gamma * h_now
}

/// Signs of `p_i - p_j`, with `+1` on exact ties.
pub fn fix_orthant(state_i: &AgentState, state_j: &AgentState) -> OrthantSigns {
    let dp = state_i.p - state_j.p;
    let sign = |x: f64| if x < 0.0 { -1 } else { 1 };
    OrthantSigns { sx: sign(dp.x), sy: sign(dp.y) }
}

/// Barrier with the absolute values replaced by the fixed branches.
pub fn linearized_barrier(dp: &Vector2<f64>, signs: &OrthantSigns, params: &CbfParams) -> f64 {
    signs.coefficients(params).dot(dp) - 1.0
}

/// One horizon-step inequality `coeff_i . u_i + coeff_j . u_j <= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub tag: RowTag,
    pub coeff_i: RowDVector<f64>,
    pub coeff_j: RowDVector<f64>,
    pub rhs: f64,
}

impl PairRow {
    pub fn lhs(&self, u_i: &DVector<f64>, u_j: &DVector<f64>) -> f64 {
        (&self.coeff_i * u_i)[0] + (&self.coeff_j * u_j)[0]
    }

    pub fn satisfied(&self, u_i: &DVector<f64>, u_j: &DVector<f64>) -> bool {
        self.lhs(u_i, u_j) <= self.rhs
    }
}

/// Everything needed to predict one agent of a pair over the horizon.
#[derive(Debug, Clone, Copy)]
pub struct PairSide<'a> {
    pub prediction: &'a Prediction,
    pub e0: &'a ErrorState,
    pub target: &'a Vector2<f64>,
}

impl PairSide<'_> {
    fn free_position(&self, l: usize) -> Vector2<f64> {
        self.target + self.prediction.free_position(l, self.e0)
    }
}

/// Rows of the decrement condition for pair `pair` over `horizon` steps.
///
/// Row `k` encodes `-(h[k+1] - (1 - gamma) h[k]) <= -margin`, with `h` the barrier on
/// the fixed orthant and positions affine in the two decisions. Requires the
/// relative position to be `p_i - p_j` with `pair = (i, j)`.
pub fn assemble_pair_constraints(
    pair: Pair,
    side_i: PairSide<'_>,
    side_j: PairSide<'_>,
    signs: &OrthantSigns,
    params: &CbfParams,
    horizon: usize,
) -> Result<Vec<PairRow>, SafetyError> {
    for side in [&side_i, &side_j] {
        if side.prediction.horizon != horizon {
            return Err(SafetyError::HorizonMismatch {
                prediction: side.prediction.horizon,
                requested: horizon,
            });
        }
    }
    let c = signs.coefficients(params).transpose();
    let keep = 1.0 - params.gamma;
    let mut rows = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let gi = &c * (side_i.prediction.position_rows(k + 1) - side_i.prediction.position_rows(k) * keep);
        let gj = &c * (side_j.prediction.position_rows(k + 1) - side_j.prediction.position_rows(k) * keep);
        let h_next = (c * (side_i.free_position(k + 1) - side_j.free_position(k + 1)))[0] - 1.0;
        let h_now = (c * (side_i.free_position(k) - side_j.free_position(k)))[0] - 1.0;
        rows.push(PairRow {
            tag: RowTag { pair, step: k },
            coeff_i: -gi,
            coeff_j: gj,
            rhs: h_next - keep * h_now - params.margin,
        });
    }
    Ok(rows)
}

/// Agent-local slice `(A_i, b_i)` of the coupled inequality
/// `sum_i (A_i u_i - b_i) <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledConstraintBlock {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub row_tags: Vec<RowTag>,
}

impl CoupledConstraintBlock {
    pub fn rows(&self) -> usize {
        self.b.len()
    }

    /// Local constraint value `g_i(u) = A_i u - b_i`.
    pub fn value(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a * u - &self.b
    }

    /// Block with no rows, for a fleet of one.
    pub fn empty(decision_len: usize) -> Self {
        Self { a: DMatrix::zeros(0, decision_len), b: DVector::zeros(0), row_tags: Vec::new() }
    }
}

/// Canonical pair order `(0,1), (0,2), ..., (n-2, n-1)`.
pub fn all_pairs(n: usize) -> Vec<Pair> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Splits stacked pair rows into per-agent blocks.
///
/// `pair_rows` holds one entry per pair in canonical order, each with the same
/// number of horizon rows. The right-hand side of every row is shared equally
/// between the two agents of its pair.
pub fn split_blocks(
    pair_rows: &[Vec<PairRow>],
    agent_count: usize,
) -> Result<Vec<CoupledConstraintBlock>, SafetyError> {
    let per_pair = pair_rows.first().map_or(0, Vec::len);
    let width = pair_rows
        .first()
        .and_then(|rows| rows.first())
        .map_or(0, |r| r.coeff_i.len());
    if let Some(bad) = pair_rows.iter().find(|rows| rows.len() != per_pair) {
        return Err(SafetyError::InconsistentRows(format!(
            "pair has {} rows, expected {per_pair}",
            bad.len()
        )));
    }
    let m = per_pair * pair_rows.len();
    let mut blocks: Vec<CoupledConstraintBlock> = (0..agent_count)
        .map(|_| CoupledConstraintBlock {
            a: DMatrix::zeros(m, width),
            b: DVector::zeros(m),
            row_tags: Vec::with_capacity(m),
        })
        .collect();
    for (row_idx, row) in pair_rows.iter().flatten().enumerate() {
        let (i, j) = row.tag.pair;
        if i >= agent_count || j >= agent_count || i == j {
            return Err(SafetyError::InconsistentRows(format!("bad pair ({i}, {j})")));
        }
        if row.coeff_i.len() != width || row.coeff_j.len() != width {
            return Err(SafetyError::InconsistentRows("coefficient width differs".into()));
        }
        blocks[i].a.set_row(row_idx, &row.coeff_i);
        blocks[j].a.set_row(row_idx, &row.coeff_j);
        blocks[i].b[row_idx] = row.rhs / 2.0;
        blocks[j].b[row_idx] = row.rhs / 2.0;
        for block in &mut blocks {
            block.row_tags.push(row.tag);
        }
    }
    Ok(blocks)
}

/// Builds agent `me`'s block from the states it knows about.
///
/// Only rows of pairs involving `me` get coefficients, but all agents agree
/// on the row layout, so the result can be summed across the fleet.
pub fn assemble_local_block(
    me: usize,
    states: &[AgentState],
    targets: &[Vector2<f64>],
    prediction: &Prediction,
    params: &CbfParams,
) -> Result<CoupledConstraintBlock, SafetyError> {
    let n = states.len();
    let horizon = prediction.horizon;
    let pairs = all_pairs(n);
    if pairs.is_empty() {
        return Ok(CoupledConstraintBlock::empty(2 * horizon));
    }
    let errors: Vec<ErrorState> = states
        .iter()
        .zip(targets)
        .map(|(s, t)| crate::model::to_error(s, t))
        .collect();
    let m = pairs.len() * horizon;
    let mut block = CoupledConstraintBlock {
        a: DMatrix::zeros(m, 2 * horizon),
        b: DVector::zeros(m),
        row_tags: Vec::with_capacity(m),
    };
    for (p_idx, &(i, j)) in pairs.iter().enumerate() {
        let base = p_idx * horizon;
        if i != me && j != me {
            for k in 0..horizon {
                block.row_tags.push(RowTag { pair: (i, j), step: k });
            }
            continue;
        }
        let signs = fix_orthant(&states[i], &states[j]);
        let rows = assemble_pair_constraints(
            (i, j),
            PairSide { prediction, e0: &errors[i], target: &targets[i] },
            PairSide { prediction, e0: &errors[j], target: &targets[j] },
            &signs,
            params,
            horizon,
        )?;
        for (k, row) in rows.into_iter().enumerate() {
            let coeff = if me == i { row.coeff_i } else { row.coeff_j };
            block.a.set_row(base + k, &coeff);
            block.b[base + k] = row.rhs / 2.0;
            block.row_tags.push(row.tag);
        }
    }
    Ok(block)
}

/// Barrier values of every pair for one snapshot of positions.
pub fn pairwise_barriers(positions: &[Vector2<f64>], params: &CbfParams, k: u64) -> Vec<SafeSetCheck> {
    all_pairs(positions.len())
        .into_iter()
        .map(|(i, j)| SafeSetCheck {
            pair: (i, j),
            k,
            value: barrier_value(&(positions[i] - positions[j]), params),
        })
        .collect()
}
