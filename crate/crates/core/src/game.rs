//! Local receding-horizon cost of the aggregative game and its pseudo-gradient.
//!
//! Agents are coupled through the fleet average of their predicted terminal
//! positions. Each agent only ever sees an estimate of that average, supplied
//! by its tracker.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};

use crate::model::{AgentModel, ErrorState, ModelError, Prediction};

/// Stacked planar accelerations `[a[0]; a[1]; ...; a[H-1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonDecision(pub DVector<f64>);

impl HorizonDecision {
    pub fn zeros(horizon: usize) -> Self {
        Self(DVector::zeros(2 * horizon))
    }

    pub fn horizon(&self) -> usize {
        self.0.len() / 2
    }

    /// Acceleration applied at horizon step `l`.
    pub fn step(&self, l: usize) -> Vector2<f64> {
        Vector2::new(self.0[2 * l], self.0[2 * l + 1])
    }

    /// Receding-horizon warm start: drop the first step and repeat the last.
    pub fn shifted(&self) -> Self {
        let h = self.horizon();
        if h == 0 {
            return self.clone();
        }
        let mut out = self.0.clone();
        for l in 0..h - 1 {
            out[2 * l] = self.0[2 * l + 2];
            out[2 * l + 1] = self.0[2 * l + 3];
        }
        Self(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    /// Terminal weight, usually the Riccati solution for `(q, r)`.
    pub p: Matrix4<f64>,
    pub beta: f64,
    pub pa: f64,
    pub po: Vector2<f64>,
    pub n: usize,
}

/// Estimate of the fleet-average predicted terminal position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateEstimate(pub Vector2<f64>);

/// Per-agent view of the game: model, prediction maps and cost.
#[derive(Debug, Clone)]
pub struct LocalGame {
    pub prediction: Prediction,
    pub params: CostParams,
    /// Block-diagonal input weight over the horizon.
    r_blocks: DMatrix<f64>,
    /// `phi(u) = terminal_map * u + phi_offset(e0)`.
    terminal_map: DMatrix<f64>,
}

impl LocalGame {
    pub fn new(model: &AgentModel, horizon: usize, params: CostParams) -> Self {
        let prediction = model.prediction(horizon);
        let mut r_blocks = DMatrix::zeros(2 * horizon, 2 * horizon);
        for l in 0..horizon {
            r_blocks.fixed_view_mut::<2, 2>(2 * l, 2 * l).copy_from(&params.r);
        }
        let terminal_map = prediction.position_rows(horizon);
        Self { prediction, params, r_blocks, terminal_map }
    }

    pub fn horizon(&self) -> usize {
        self.prediction.horizon
    }

    /// `2 x 2H` matrix `M_i` of the aggregation map.
    pub fn terminal_map(&self) -> &DMatrix<f64> {
        &self.terminal_map
    }

    /// Constant part `c_i` of the aggregation map.
    pub fn phi_offset(&self, e0: &ErrorState, target: &Vector2<f64>) -> Vector2<f64> {
        target + self.prediction.free_position(self.horizon(), e0)
    }

    /// Predicted absolute terminal position `p_i[H]`.
    pub fn phi(&self, e0: &ErrorState, u: &DVector<f64>, target: &Vector2<f64>) -> Vector2<f64> {
        let moved = &self.terminal_map * u;
        self.phi_offset(e0, target) + Vector2::new(moved[0], moved[1])
    }

    pub fn cost(&self, e0: &ErrorState, u: &DVector<f64>, sigma: &AggregateEstimate) -> Result<f64, ModelError> {
        let traj = self.prediction.apply(e0, u)?;
        let h = self.horizon();
        let cp = &self.params;
        let mut total = 0.0;
        for l in 0..h {
            let e = traj.fixed_rows::<4>(4 * l);
            let a = Vector2::new(u[2 * l], u[2 * l + 1]);
            total += e.dot(&(cp.q * e)) + a.dot(&(cp.r * a));
        }
        let e_h = traj.fixed_rows::<4>(4 * h);
        total += cp.beta * e_h.dot(&(cp.p * e_h));
        total += cp.pa / cp.n as f64 * (sigma.0 - cp.po).norm_squared();
        Ok(total)
    }

    /// Gradient of the cost with respect to `u` holding `sigma` fixed, plus the
    /// chain-rule term through this agent's own share of the aggregate.
    pub fn pseudo_gradient(
        &self,
        e0: &ErrorState,
        u: &DVector<f64>,
        sigma: &AggregateEstimate,
    ) -> Result<DVector<f64>, ModelError> {
        let traj = self.prediction.apply(e0, u)?;
        let h = self.horizon();
        let cp = &self.params;
        // weighted state residuals, stacked like `traj`
        let mut weighted = DVector::zeros(traj.len());
        for l in 0..h {
            let e = traj.fixed_rows::<4>(4 * l).into_owned();
            weighted.fixed_rows_mut::<4>(4 * l).copy_from(&(cp.q * e * 2.0));
        }
        let e_h = traj.fixed_rows::<4>(4 * h).into_owned();
        weighted.fixed_rows_mut::<4>(4 * h).copy_from(&(cp.p * e_h * (2.0 * cp.beta)));
        let mut grad = self.prediction.forced.tr_mul(&weighted) + &self.r_blocks * u * 2.0;
        let n = cp.n as f64;
        let d_sigma = (sigma.0 - cp.po) * (2.0 * cp.pa / n);
        grad += self.terminal_map.tr_mul(&DVector::from_column_slice(d_sigma.as_slice())) / n;
        Ok(grad)
    }

    /// Hessian of the local cost in `u` for fixed `sigma` (constant).
    pub fn local_hessian(&self) -> DMatrix<f64> {
        let h = self.horizon();
        let cp = &self.params;
        let mut w = DMatrix::zeros(4 * (h + 1), 4 * (h + 1));
        for l in 0..h {
            w.fixed_view_mut::<4, 4>(4 * l, 4 * l).copy_from(&(cp.q * 2.0));
        }
        w.fixed_view_mut::<4, 4>(4 * h, 4 * h).copy_from(&(cp.p * (2.0 * cp.beta)));
        self.prediction.forced.transpose() * w * &self.prediction.forced + &self.r_blocks * 2.0
    }
}

/// Fleet average of the predicted terminal positions. Test and oracle use only.
pub fn sigma_true(
    games: &[&LocalGame],
    e0s: &[ErrorState],
    us: &[DVector<f64>],
    targets: &[Vector2<f64>],
) -> AggregateEstimate {
    let n = games.len() as f64;
    let sum: Vector2<f64> = games
        .iter()
        .zip(e0s)
        .zip(us)
        .zip(targets)
        .map(|(((g, e0), u), t)| g.phi(e0, u, t))
        .sum();
    AggregateEstimate(sum / n)
}

/// Euclidean projection onto the acceleration box.
pub fn project_box(u: &DVector<f64>, a_max: f64) -> HorizonDecision {
    HorizonDecision(u.map(|x| x.clamp(-a_max, a_max)))
}
