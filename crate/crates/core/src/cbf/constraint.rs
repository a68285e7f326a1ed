use thiserror::Error;

use super::ast::Expr;
use super::eval::{eval_with_gradient, EvalError, Params};

/// Below this norm of `g(x)ᵀ∇h(x)` the control has no first-order effect on `h`.
pub const RELATIVE_DEGREE_TOL: f64 = 1e-9;

/// A barrier expression together with the state dimension it is defined on.
#[derive(Debug, Clone, PartialEq)]
pub struct Barrier {
    expr: Expr,
    state_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BarrierError {
    #[error("x[{index}] is out of range for state dimension {dim}")]
    StateIndex { index: usize, dim: usize },
    #[error("cannot compose an empty list of barriers")]
    Empty,
    #[error("barrier {index} has state dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
}

impl Barrier {
    pub fn new(expr: Expr, state_dim: usize) -> Result<Barrier, BarrierError> {
        if let Some(i) = expr.max_state_index() {
            if i >= state_dim {
                return Err(BarrierError::StateIndex { index: i, dim: state_dim });
            }
        }
        Ok(Barrier { expr, state_dim })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
}

/// `h = min(h1, min(h2, ...))`, non-negative exactly when every component is.
pub fn compose_min(barriers: &[Barrier]) -> Result<Barrier, BarrierError> {
    let (last, rest) = barriers.split_last().ok_or(BarrierError::Empty)?;
    let dim = barriers[0].state_dim;
    for (index, b) in barriers.iter().enumerate() {
        if b.state_dim != dim {
            return Err(BarrierError::DimensionMismatch { index, expected: dim, found: b.state_dim });
        }
    }
    let expr = rest.iter().rev().fold(last.expr.clone(), |acc, b| Expr::min(b.expr.clone(), acc));
    Ok(Barrier { expr, state_dim: dim })
}

/// Control-affine dynamics `ẋ = f(x) + g(x)u`.
pub trait PlantModel {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    /// `g(x)` as `state_dim` rows of `control_dim` entries.
    fn input_matrix(&self, x: &[f64]) -> Vec<Vec<f64>>;

    /// One forward-Euler step.
    fn euler_step(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let f = self.drift(x);
        let g = self.input_matrix(x);
        x.iter()
            .zip(f)
            .zip(g)
            .map(|((xi, fi), row)| xi + dt * (fi + row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()))
            .collect()
    }
}

/// Integrator plant: control axis `j` drives state `actuated[j]` directly,
/// the remaining states move with a constant drift.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorPlant {
    state_dim: usize,
    actuated: Vec<usize>,
    drift: Vec<f64>,
}

impl IntegratorPlant {
    /// Fully actuated single integrator, `n = m`.
    pub fn single(n: usize) -> Self {
        IntegratorPlant { state_dim: n, actuated: (0..n).collect(), drift: vec![0.0; n] }
    }

    /// Single integrator on `actuated` states inside an `n`-dimensional state.
    pub fn actuating(n: usize, actuated: Vec<usize>) -> Result<Self, String> {
        if let Some(&bad) = actuated.iter().find(|&&i| i >= n) {
            return Err(format!("actuated state {bad} out of range for dimension {n}"));
        }
        let mut seen = actuated.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != actuated.len() {
            return Err("actuated states must be distinct".into());
        }
        Ok(IntegratorPlant { state_dim: n, actuated, drift: vec![0.0; n] })
    }

    pub fn with_drift(mut self, drift: Vec<f64>) -> Result<Self, String> {
        if drift.len() != self.state_dim {
            return Err(format!("drift has length {}, expected {}", drift.len(), self.state_dim));
        }
        self.drift = drift;
        Ok(self)
    }

    pub fn actuated(&self) -> &[usize] {
        &self.actuated
    }
}

impl PlantModel for IntegratorPlant {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.actuated.len()
    }

    fn drift(&self, _x: &[f64]) -> Vec<f64> {
        self.drift.clone()
    }

    fn input_matrix(&self, _x: &[f64]) -> Vec<Vec<f64>> {
        let m = self.actuated.len();
        let mut g = vec![vec![0.0; m]; self.state_dim];
        for (j, &i) in self.actuated.iter().enumerate() {
            g[i][j] = 1.0;
        }
        g
    }
}

/// `a·u + c ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub a: Vec<f64>,
    pub c: f64,
}

impl LinearConstraint {
    pub fn new(a: Vec<f64>, c: f64) -> Self {
        LinearConstraint { a, c }
    }

    pub fn slack(&self, u: &[f64]) -> f64 {
        self.a.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("relative degree violation: |g(x)ᵀ∇h(x)| = {norm:e} ≤ {RELATIVE_DEGREE_TOL:e}")]
    RelativeDegree { norm: f64, drift_term: f64 },
    #[error("state has dimension {found}, plant expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("class-K gain must be positive and finite, got {0}")]
    Gain(f64),
}

/// Linear CBF condition `∇h·(f + g u) + k·h ≥ 0` written as `a·u + c ≥ 0`
/// with `a = g(x)ᵀ∇h(x)` and `c = ∇h(x)·f(x) + k·h(x)`.
pub fn cbf_constraint(
    expr: &Expr,
    x: &[f64],
    params: &Params,
    plant: &dyn PlantModel,
    gain: f64,
) -> Result<LinearConstraint, ConstraintError> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(ConstraintError::Gain(gain));
    }
    if x.len() != plant.state_dim() {
        return Err(ConstraintError::Dimension { expected: plant.state_dim(), found: x.len() });
    }
    let (h, grad) = eval_with_gradient(expr, x, params)?;
    let f = plant.drift(x);
    let g = plant.input_matrix(x);
    let m = plant.control_dim();
    let a: Vec<f64> = (0..m).map(|j| grad.iter().zip(&g).map(|(gi, row)| gi * row[j]).sum()).collect();
    let c = grad.iter().zip(&f).map(|(gi, fi)| gi * fi).sum::<f64>() + gain * h;
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= RELATIVE_DEGREE_TOL {
        return Err(ConstraintError::RelativeDegree { norm, drift_term: c });
    }
    Ok(LinearConstraint { a, c })
}
