//! Minimal-correction safety filter.
//!
//! Solves
//!
//! ```text
//!     minimize    ‖u - u_nom‖²
//!     subject to  a_i·u + c_i ≥ 0
//!                 lo ≤ u ≤ hi
//! ```
//!
//! with a dual active-set iteration (Goldfarb–Idnani specialised to an
//! identity Hessian). It starts at the unconstrained minimiser `u_nom` and
//! adds the most violated constraint until all hold, dropping constraints
//! whose multipliers would turn negative. A constraint that is linearly
//! dependent on the working set and cannot be reached by dropping anything
//! proves infeasibility; the working set plus that constraint is returned as
//! the certificate.

use std::fmt;

use thiserror::Error;

use super::constraint::LinearConstraint;

pub const MAX_CONTROL_DIM: usize = 16;
/// Slack below `-FEASIBILITY_TOL` counts as a violation of the result.
pub const FEASIBILITY_TOL: f64 = 1e-8;
const VIOLATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn symmetric(m: usize, limit: f64) -> Self {
        BoxBounds { lo: vec![-limit; m], hi: vec![limit; m] }
    }
}

/// Identifies a row of the combined constraint system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConstraintRef {
    Linear(usize),
    Lower(usize),
    Upper(usize),
}

impl fmt::Display for ConstraintRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintRef::Linear(i) => write!(f, "constraint {i}"),
            ConstraintRef::Lower(j) => write!(f, "lower bound on u[{j}]"),
            ConstraintRef::Upper(j) => write!(f, "upper bound on u[{j}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u_safe: Vec<f64>,
    /// At least one constraint had to be enforced.
    pub active: bool,
    /// `‖u_safe - u_nom‖`.
    pub correction: f64,
    /// Enforced constraints with their multipliers.
    pub active_set: Vec<(ConstraintRef, f64)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("infeasible constraint set; certificate: {}", fmt_refs(.certificate))]
    Infeasible { certificate: Vec<ConstraintRef> },
    #[error("control dimension {0} exceeds the supported maximum of {MAX_CONTROL_DIM}")]
    TooLarge(usize),
    #[error("{what} has length {found}, expected {expected}")]
    Dimension { what: String, expected: usize, found: usize },
    #[error("non-finite input in {0}")]
    NonFinite(String),
    #[error("bounds for u[{0}] are empty (lo > hi)")]
    EmptyBox(usize),
    #[error("active-set iteration did not converge")]
    NoConvergence,
}

fn fmt_refs(refs: &[ConstraintRef]) -> String {
    refs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

struct Row {
    id: ConstraintRef,
    n: Vec<f64>,
    /// `n·u ≥ b`
    b: f64,
}

impl Row {
    fn slack(&self, u: &[f64]) -> f64 {
        dot(&self.n, u) - self.b
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rows(m: usize, constraints: &[LinearConstraint], bounds: Option<&BoxBounds>) -> Result<Vec<Row>, QpError> {
    let mut out = Vec::with_capacity(constraints.len() + 2 * m);
    for (i, c) in constraints.iter().enumerate() {
        if c.a.len() != m {
            return Err(QpError::Dimension { what: format!("constraint {i}"), expected: m, found: c.a.len() });
        }
        if !c.c.is_finite() || c.a.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite(format!("constraint {i}")));
        }
        out.push(Row { id: ConstraintRef::Linear(i), n: c.a.clone(), b: -c.c });
    }
    if let Some(bx) = bounds {
        for (what, v) in [("lower bounds", &bx.lo), ("upper bounds", &bx.hi)] {
            if v.len() != m {
                return Err(QpError::Dimension { what: what.into(), expected: m, found: v.len() });
            }
        }
        for j in 0..m {
            let (lo, hi) = (bx.lo[j], bx.hi[j]);
            if lo.is_nan() || hi.is_nan() {
                return Err(QpError::NonFinite(format!("bounds on u[{j}]")));
            }
            if lo > hi {
                return Err(QpError::EmptyBox(j));
            }
            let mut e = vec![0.0; m];
            if lo.is_finite() {
                e[j] = 1.0;
                out.push(Row { id: ConstraintRef::Lower(j), n: e.clone(), b: lo });
            }
            if hi.is_finite() {
                e[j] = -1.0;
                out.push(Row { id: ConstraintRef::Upper(j), n: e, b: -hi });
            }
        }
    }
    Ok(out)
}

/// Solve `M y = r` for symmetric positive definite `M` (Cholesky).
fn spd_solve(m: &[Vec<f64>], r: &[f64]) -> Option<Vec<f64>> {
    let k = r.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s = m[i][j] - (0..j).map(|p| l[i][p] * l[j][p]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        y[i] = (r[i] - (0..i).map(|p| l[i][p] * y[p]).sum::<f64>()) / l[i][i];
    }
    for i in (0..k).rev() {
        y[i] = (y[i] - (i + 1..k).map(|p| l[p][i] * y[p]).sum::<f64>()) / l[i][i];
    }
    Some(y)
}

fn gram(rows: &[Row], set: &[usize]) -> Vec<Vec<f64>> {
    set.iter().map(|&i| set.iter().map(|&j| dot(&rows[i].n, &rows[j].n)).collect()).collect()
}

/// Project `u_nom` onto the feasible set.
pub fn qp_filter(
    u_nom: &[f64],
    constraints: &[LinearConstraint],
    bounds: Option<&BoxBounds>,
) -> Result<FilterResult, QpError> {
    let m = u_nom.len();
    if m > MAX_CONTROL_DIM {
        return Err(QpError::TooLarge(m));
    }
    if u_nom.iter().any(|v| !v.is_finite()) {
        return Err(QpError::NonFinite("nominal control".into()));
    }
    let rows = rows(m, constraints, bounds)?;

    if rows.iter().all(|r| r.slack(u_nom) >= 0.0) {
        return Ok(FilterResult { u_safe: u_nom.to_vec(), active: false, correction: 0.0, active_set: vec![] });
    }

    // Exact projection onto a single half-space.
    if rows.len() == 1 {
        let r = &rows[0];
        let nn = dot(&r.n, &r.n);
        if nn == 0.0 {
            return Err(QpError::Infeasible { certificate: vec![r.id] });
        }
        let t = -r.slack(u_nom) / nn;
        let u: Vec<f64> = u_nom.iter().zip(&r.n).map(|(u, n)| u + t * n).collect();
        return Ok(finish(u_nom, u, &rows, vec![0], vec![t]));
    }

    let mut u = u_nom.to_vec();
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let max_iter = 50 * (rows.len() + m + 1);
    let mut iter = 0;

    loop {
        // Most violated constraint, measured as signed distance.
        let mut pick: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let nr = norm(&r.n);
            let s = r.slack(&u);
            let tol = VIOLATION_TOL * (1.0 + r.b.abs() + nr * norm(&u));
            if s < -tol {
                let dist = if nr > 0.0 { s / nr } else { f64::NEG_INFINITY };
                if pick.is_none_or(|(_, d)| dist < d) {
                    pick = Some((i, dist));
                }
            }
        }
        let Some((p, _)) = pick else { break };
        let np = rows[p].n.clone();
        let mut lambda_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::NoConvergence);
            }
            // r = (NᵀN)⁻¹ Nᵀ n_p, z = n_p − N r
            let r_dir = if active.is_empty() {
                Vec::new()
            } else {
                let rhs: Vec<f64> = active.iter().map(|&i| dot(&rows[i].n, &np)).collect();
                spd_solve(&gram(&rows, &active), &rhs).ok_or(QpError::NoConvergence)?
            };
            let mut z = np.clone();
            for (k, &i) in active.iter().enumerate() {
                for (zj, nj) in z.iter_mut().zip(&rows[i].n) {
                    *zj -= r_dir[k] * nj;
                }
            }
            // Largest dual step before an active multiplier reaches zero.
            let mut block: Option<(usize, f64)> = None;
            for (k, &rk) in r_dir.iter().enumerate() {
                if rk > 0.0 {
                    let t = lambda[k] / rk;
                    if block.is_none_or(|(_, bt)| t < bt) {
                        block = Some((k, t));
                    }
                }
            }
            let zn = dot(&z, &np);
            let dependent = norm(&z) <= 1e-12 * norm(&np).max(1.0) || zn <= 0.0;
            if dependent {
                let Some((k, t)) = block else {
                    let mut certificate: Vec<ConstraintRef> = active.iter().map(|&i| rows[i].id).collect();
                    certificate.push(rows[p].id);
                    certificate.sort();
                    return Err(QpError::Infeasible { certificate });
                };
                for (l, rk) in lambda.iter_mut().zip(&r_dir) {
                    *l -= t * rk;
                }
                lambda_p += t;
                active.remove(k);
                lambda.remove(k);
                continue;
            }
            let full = -rows[p].slack(&u) / zn;
            let (t, drop) = match block {
                Some((k, bt)) if bt < full => (bt, Some(k)),
                _ => (full, None),
            };
            for (uj, zj) in u.iter_mut().zip(&z) {
                *uj += t * zj;
            }
            for (l, rk) in lambda.iter_mut().zip(&r_dir) {
                *l -= t * rk;
            }
            lambda_p += t;
            match drop {
                Some(k) => {
                    active.remove(k);
                    lambda.remove(k);
                }
                None => {
                    active.push(p);
                    lambda.push(lambda_p);
                    break;
                }
            }
        }
    }

    // Re-solve the equality-constrained projection on the final working set
    // so accumulated rounding from the iteration does not leak into u.
    if !active.is_empty() {
        let rhs: Vec<f64> = active.iter().map(|&i| rows[i].b - dot(&rows[i].n, u_nom)).collect();
        if let Some(l) = spd_solve(&gram(&rows, &active), &rhs) {
            let mut polished = u_nom.to_vec();
            for (k, &i) in active.iter().enumerate() {
                for (uj, nj) in polished.iter_mut().zip(&rows[i].n) {
                    *uj += l[k] * nj;
                }
            }
            let worst = |v: &[f64]| rows.iter().map(|r| r.slack(v)).fold(f64::INFINITY, f64::min);
            if l.iter().all(|&x| x >= 0.0) && worst(&polished) >= worst(&u).min(0.0) {
                u = polished;
                lambda = l;
            }
        }
    }
    Ok(finish(u_nom, u, &rows, active, lambda))
}

fn finish(u_nom: &[f64], u: Vec<f64>, rows: &[Row], active: Vec<usize>, lambda: Vec<f64>) -> FilterResult {
    let correction = u.iter().zip(u_nom).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    FilterResult {
        active: !active.is_empty(),
        correction,
        active_set: active.iter().zip(lambda).map(|(&i, l)| (rows[i].id, l)).collect(),
        u_safe: u,
    }
}

/// Largest violation of the KKT conditions at `result`: stationarity,
/// primal feasibility, dual feasibility and complementarity.
pub fn kkt_residual(
    u_nom: &[f64],
    constraints: &[LinearConstraint],
    bounds: Option<&BoxBounds>,
    result: &FilterResult,
) -> f64 {
    let Ok(rows) = rows(u_nom.len(), constraints, bounds) else {
        return f64::INFINITY;
    };
    let u = &result.u_safe;
    let mut station: Vec<f64> = u.iter().zip(u_nom).map(|(a, b)| a - b).collect();
    let mut worst: f64 = 0.0;
    for (id, l) in &result.active_set {
        let Some(r) = rows.iter().find(|r| r.id == *id) else {
            return f64::INFINITY;
        };
        for (s, n) in station.iter_mut().zip(&r.n) {
            *s -= l * n;
        }
        worst = worst.max((-l).max(0.0)).max((l * r.slack(u)).abs());
    }
    for r in &rows {
        worst = worst.max((-r.slack(u)).max(0.0));
    }
    worst.max(norm(&station))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lc(a: &[f64], c: f64) -> LinearConstraint {
        LinearConstraint::new(a.to_vec(), c)
    }

    #[test]
    fn clips_to_half_line() {
        let r = qp_filter(&[-2.0], &[lc(&[1.0], 1.0)], None).unwrap();
        assert_eq!(r.u_safe, vec![-1.0]);
        assert!(r.active);
        assert_eq!(r.correction, 1.0);
    }

    #[test]
    fn inactive_constraint_is_a_no_op() {
        let r = qp_filter(&[0.5], &[lc(&[1.0], 1.0)], None).unwrap();
        assert_eq!(r.u_safe, vec![0.5]);
        assert!(!r.active);
        assert_eq!(r.correction, 0.0);
    }

    #[test]
    fn projects_onto_half_plane() {
        let r = qp_filter(&[0.0, 0.0], &[lc(&[1.0, 1.0], -2.0)], None).unwrap();
        assert!((r.u_safe[0] - 1.0).abs() < 1e-12 && (r.u_safe[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_of_two_constraints() {
        // u0 ≥ 1, u1 ≥ 2 from the origin
        let cs = [lc(&[1.0, 0.0], -1.0), lc(&[0.0, 1.0], -2.0)];
        let r = qp_filter(&[0.0, 0.0], &cs, None).unwrap();
        assert!((r.u_safe[0] - 1.0).abs() < 1e-12 && (r.u_safe[1] - 2.0).abs() < 1e-12);
        assert_eq!(r.active_set.len(), 2);
        assert!(kkt_residual(&[0.0, 0.0], &cs, None, &r) <= 1e-8);
    }

    #[test]
    fn drops_constraint_that_becomes_inactive() {
        // Adding the second constraint releases the first.
        let cs = [lc(&[1.0, 0.2], -1.0), lc(&[1.0, -1.0], -3.0)];
        let u0 = [0.0, 0.0];
        let r = qp_filter(&u0, &cs, None).unwrap();
        assert!(kkt_residual(&u0, &cs, None, &r) <= 1e-8);
        for c in &cs {
            assert!(c.slack(&r.u_safe) >= -FEASIBILITY_TOL);
        }
    }

    #[test]
    fn box_bounds() {
        let b = BoxBounds::symmetric(2, 1.0);
        let r = qp_filter(&[3.0, -0.5], &[], Some(&b)).unwrap();
        assert_eq!(r.u_safe, vec![1.0, -0.5]);
        assert_eq!(r.active_set[0].0, ConstraintRef::Upper(0));
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        // u ≥ 1 and −u ≥ 1
        let err = qp_filter(&[0.0], &[lc(&[1.0], -1.0), lc(&[-1.0], -1.0)], None).unwrap_err();
        assert_eq!(err, QpError::Infeasible { certificate: vec![ConstraintRef::Linear(0), ConstraintRef::Linear(1)] });
        let err = qp_filter(&[0.0], &[lc(&[1.0], -2.0)], Some(&BoxBounds::symmetric(1, 1.0))).unwrap_err();
        assert!(matches!(err, QpError::Infeasible { .. }));
        let err = qp_filter(&[0.0, 0.0], &[lc(&[0.0, 0.0], -1.0)], None).unwrap_err();
        assert!(matches!(err, QpError::Infeasible { .. }));
    }

    #[test]
    fn input_validation() {
        assert!(matches!(qp_filter(&[0.0; 17], &[], None), Err(QpError::TooLarge(17))));
        assert!(matches!(qp_filter(&[0.0], &[lc(&[1.0, 2.0], 0.0)], None), Err(QpError::Dimension { .. })));
        assert!(matches!(qp_filter(&[f64::NAN], &[], None), Err(QpError::NonFinite(_))));
        let bad = BoxBounds { lo: vec![1.0], hi: vec![0.0] };
        assert!(matches!(qp_filter(&[0.0], &[], Some(&bad)), Err(QpError::EmptyBox(0))));
    }

    #[test]
    fn degenerate_duplicate_constraints() {
        let cs = [lc(&[1.0, 1.0], -2.0), lc(&[2.0, 2.0], -4.0), lc(&[1.0, 1.0], -2.0)];
        let r = qp_filter(&[0.0, 0.0], &cs, None).unwrap();
        assert!((r.u_safe[0] - 1.0).abs() < 1e-12 && (r.u_safe[1] - 1.0).abs() < 1e-12);
    }
}
