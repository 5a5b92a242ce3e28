//! Planar double-integrator agent model.
//!
//! Each agent is discretized with a zero-order hold, which is exact for the
//! double integrator. The solver works in error coordinates (state minus the
//! agent's target), where the dynamics keep the same matrices because the
//! target is constant.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sample time must be positive and finite, got {0}")]
    InvalidSampleTime(f64),
    #[error("acceleration bound must be positive and finite, got {0}")]
    InvalidAccelBound(f64),
    #[error("decision vector has {got} entries, expected {expected} (2 per horizon step)")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    DareNotConverged { iterations: usize, residual: f64 },
}

/// Discrete-time LTI plant `z[k+1] = Ad z[k] + Bd a[k]` with a box on `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub ad: Matrix4<f64>,
    pub bd: Matrix4x2<f64>,
    pub ts: f64,
    pub a_max: f64,
}

/// Measured agent state: planar position, velocity and the time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub p: Vector2<f64>,
    pub v: Vector2<f64>,
    pub k: u64,
}

/// State expressed relative to the agent target, `[p - target; v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState(pub Vector4<f64>);

/// Zero-order-hold discretization of the planar double integrator.
pub fn discretize(ts: f64, a_max: f64) -> Result<AgentModel, ModelError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(ModelError::InvalidSampleTime(ts));
    }
    if !(a_max > 0.0 && a_max.is_finite()) {
        return Err(ModelError::InvalidAccelBound(a_max));
    }
    #[rustfmt::skip]
    let ad = Matrix4::new(
        1.0, 0.0, ts,  0.0,
        0.0, 1.0, 0.0, ts,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    let half = ts * ts / 2.0;
    #[rustfmt::skip]
    let bd = Matrix4x2::new(
        half, 0.0,
        0.0,  half,
        ts,   0.0,
        0.0,  ts,
    );
    Ok(AgentModel { ad, bd, ts, a_max })
}

impl AgentState {
    pub fn new(p: Vector2<f64>, v: Vector2<f64>) -> Self {
        Self { p, v, k: 0 }
    }

    pub fn at_rest(x: f64, y: f64) -> Self {
        Self::new(Vector2::new(x, y), Vector2::zeros())
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.p.x, self.p.y, self.v.x, self.v.y)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

impl ErrorState {
    pub fn zero() -> Self {
        Self(Vector4::zeros())
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.0[0], self.0[1])
    }
}

impl AgentModel {
    /// One plant step. No clamping: bounds are the solver's business.
    pub fn step(&self, z: &AgentState, a: &Vector2<f64>) -> Result<AgentState, ModelError> {
        if !a.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite("control input"));
        }
        let next = self.ad * z.as_vector() + self.bd * a;
        Ok(AgentState {
            p: Vector2::new(next[0], next[1]),
            v: Vector2::new(next[2], next[3]),
            k: z.k + 1,
        })
    }

    /// Predicted error trajectory `e[0..=H]` for the stacked decision `u`.
    pub fn rollout(&self, e0: &ErrorState, u: &DVector<f64>) -> Result<Vec<ErrorState>, ModelError> {
        if u.len() % 2 != 0 {
            return Err(ModelError::HorizonMismatch { expected: u.len() + 1, got: u.len() });
        }
        let horizon = u.len() / 2;
        let mut out = Vec::with_capacity(horizon + 1);
        let mut e = e0.0;
        out.push(ErrorState(e));
        for l in 0..horizon {
            let a = Vector2::new(u[2 * l], u[2 * l + 1]);
            e = self.ad * e + self.bd * a;
            out.push(ErrorState(e));
        }
        Ok(out)
    }

    /// Affine rollout map for horizon `horizon`.
    pub fn prediction(&self, horizon: usize) -> Prediction {
        Prediction::new(self, horizon)
    }
}

pub fn to_error(z: &AgentState, target: &Vector2<f64>) -> ErrorState {
    ErrorState(Vector4::new(z.p.x - target.x, z.p.y - target.y, z.v.x, z.v.y))
}

pub fn from_error(e: &ErrorState, target: &Vector2<f64>, k: u64) -> AgentState {
    AgentState {
        p: Vector2::new(e.0[0] + target.x, e.0[1] + target.y),
        v: Vector2::new(e.0[2], e.0[3]),
        k,
    }
}

/// Stacked rollout `e[l] = free[l] e0 + forced[l] u` for `l = 0..=H`.
///
/// `free` is `4(H+1) x 4` and `forced` is `4(H+1) x 2H`; block row `l` of
/// `forced` is zero beyond column `2l`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub horizon: usize,
    pub free: DMatrix<f64>,
    pub forced: DMatrix<f64>,
}

impl Prediction {
    fn new(model: &AgentModel, horizon: usize) -> Self {
        let rows = 4 * (horizon + 1);
        let mut free = DMatrix::zeros(rows, 4);
        let mut forced = DMatrix::zeros(rows, 2 * horizon);
        let mut power = Matrix4::identity();
        for l in 0..=horizon {
            free.fixed_view_mut::<4, 4>(4 * l, 0).copy_from(&power);
            power = model.ad * power;
        }
        // forced[l][m] = Ad^(l-1-m) Bd for m < l
        for l in 1..=horizon {
            let mut block = model.bd;
            for m in (0..l).rev() {
                forced.fixed_view_mut::<4, 2>(4 * l, 2 * m).copy_from(&block);
                block = model.ad * block;
            }
        }
        Self { horizon, free, forced }
    }

    pub fn free_block(&self, l: usize) -> Matrix4<f64> {
        self.free.fixed_view::<4, 4>(4 * l, 0).into_owned()
    }

    /// `4 x 2H` sensitivity of `e[l]` with respect to `u`.
    pub fn forced_rows(&self, l: usize) -> DMatrix<f64> {
        self.forced.rows(4 * l, 4).into_owned()
    }

    /// `2 x 2H` sensitivity of the position part of `e[l]`.
    pub fn position_rows(&self, l: usize) -> DMatrix<f64> {
        self.forced.rows(4 * l, 2).into_owned()
    }

    /// Position part of the free response `free[l] e0`.
    pub fn free_position(&self, l: usize, e0: &ErrorState) -> Vector2<f64> {
        let e = self.free_block(l) * e0.0;
        Vector2::new(e[0], e[1])
    }

    pub fn check_len(&self, u: &DVector<f64>) -> Result<(), ModelError> {
        if u.len() != 2 * self.horizon {
            return Err(ModelError::HorizonMismatch { expected: 2 * self.horizon, got: u.len() });
        }
        Ok(())
    }

    /// Same trajectory as [`AgentModel::rollout`] through the affine map.
    pub fn apply(&self, e0: &ErrorState, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_len(u)?;
        Ok(&self.free * e0.0 + &self.forced * u)
    }
}

pub const DARE_MAX_ITERATIONS: usize = 10_000;
pub const DARE_STEP_TOLERANCE: f64 = 1e-12;

/// Stabilizing solution of the discrete algebraic Riccati equation by value
/// iteration from `P = Q`.
///
/// Works for any state/input dimension; the agent model uses 4x4 / 4x2.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITERATIONS {
        let next = riccati_map(&p, a, &at, b, &bt, q, r)?;
        if !next.iter().all(|x| x.is_finite()) {
            break;
        }
        let step = (&next - &p).amax();
        let scale = next.amax().max(1.0);
        p = symmetrize(next);
        if step <= DARE_STEP_TOLERANCE * scale {
            // a few extra sweeps push the residual to round-off level
            for _ in 0..3 {
                p = symmetrize(riccati_map(&p, a, &at, b, &bt, q, r)?);
            }
            return Ok(p);
        }
    }
    let residual = dare_residual(&p, a, b, q, r);
    Err(ModelError::DareNotConverged { iterations: DARE_MAX_ITERATIONS, residual })
}

fn riccati_map(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    at: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let pb = p * b;
    let s = r + bt * &pb;
    let s_inv = s.try_inverse().ok_or(ModelError::NonFinite("R + B'PB inverse"))?;
    let atpb = at * &pb;
    Ok(q + at * p * a - &atpb * s_inv * atpb.transpose())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Infinity-norm (max abs entry) residual of the Riccati equation at `p`.
pub fn dare_residual(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> f64 {
    match riccati_map(p, a, &a.transpose(), b, &b.transpose(), q, r) {
        Ok(rhs) => (p - rhs).amax(),
        Err(_) => f64::INFINITY,
    }
}

/// Terminal weight for an agent model with 4x4 `Q` and 2x2 `R`.
pub fn terminal_weight(
    model: &AgentModel,
    q: &Matrix4<f64>,
    r: &Matrix2<f64>,
) -> Result<Matrix4<f64>, ModelError> {
    let p = solve_dare(
        &to_dyn(&model.ad),
        &to_dyn(&model.bd),
        &to_dyn(q),
        &to_dyn(r),
    )?;
    Ok(Matrix4::from_iterator(p.iter().copied()))
}

fn to_dyn<const R: usize, const C: usize>(
    m: &nalgebra::SMatrix<f64, R, C>,
) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}
