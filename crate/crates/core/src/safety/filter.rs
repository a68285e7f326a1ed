//! Filtered actions: the nominal command of an action is replaced by the
//! closest command satisfying every configured barrier.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::condition::{component, read_fresh, ConditionFault, ConditionInstance};
use crate::bt::{Blackboard, Leaf, LeafError, NodeStatus, TickContext};
use crate::cbf::{
    cbf_constraint, eval_with_gradient, qp_filter, BoxBounds, ConstraintError, ConstraintRef, EvalError,
    IntegratorPlant, LinearConstraint, QpError, FEASIBILITY_TOL,
};

const CUT_TOL: f64 = 1e-9;
const MAX_CUTS: usize = 20;

/// State `state` of a barrier evolves at the rate read from `channel[component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBinding {
    pub state: usize,
    pub channel: String,
    pub component: usize,
}

/// A barrier on the plant state. Control axis `j` drives state `actuated[j]`
/// as a single integrator; states with a rate binding drift at that rate,
/// all other states are constant.
#[derive(Debug, Clone)]
pub struct StateBarrier {
    instance: ConditionInstance,
    actuated: Vec<usize>,
    rates: Vec<RateBinding>,
}

/// A barrier whose state is the command itself, `x[i] = u[component of x[i]]`.
#[derive(Debug, Clone)]
pub struct InputBarrier {
    instance: ConditionInstance,
    axes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("barrier `{barrier}`: {message}")]
    Config { barrier: String, message: String },
    #[error("barrier `{barrier}` fails the relative-degree check: |g(x)ᵀ∇h(x)| = {norm:e}")]
    RelativeDegree { barrier: String, norm: f64 },
    #[error("barrier `{barrier}` cannot be checked: {fault}")]
    Probe { barrier: String, fault: FilterFault },
}

/// Why a tick could not produce a certified command.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterFault {
    #[error("barrier `{barrier}`: {fault}")]
    State { barrier: String, fault: ConditionFault },
    #[error("barrier `{barrier}`: {error}")]
    Constraint { barrier: String, error: ConstraintError },
    #[error("barrier `{barrier}` lost relative degree with h decreasing (drift term {drift_term:e})")]
    LostControl { barrier: String, drift_term: f64 },
    #[error("no command satisfies every barrier; conflicting: {}", .conflicting.join(", "))]
    Infeasible { conflicting: Vec<String> },
    #[error(transparent)]
    Qp(QpError),
}

/// Result of filtering one nominal command.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub u_safe: Vec<f64>,
    /// `‖u_safe - u_nom‖`.
    pub correction: f64,
    /// Some constraint had to be enforced.
    pub active: bool,
    /// The per-barrier linear constraints that were imposed, in order.
    pub constraints: Vec<(String, LinearConstraint)>,
}

impl StateBarrier {
    pub fn new(
        instance: ConditionInstance,
        actuated: Vec<usize>,
        rates: Vec<RateBinding>,
    ) -> Result<Self, FilterError> {
        let n = instance.spec().state_dim;
        let config = |message: String| FilterError::Config { barrier: instance.label().to_owned(), message };
        IntegratorPlant::actuating(n, actuated.clone()).map_err(config)?;
        for r in &rates {
            if r.state >= n {
                return Err(config(format!("rate binding for x[{}] exceeds state dimension {n}", r.state)));
            }
            if actuated.contains(&r.state) {
                return Err(config(format!("x[{}] is actuated and cannot also have a rate binding", r.state)));
            }
        }
        Ok(StateBarrier { instance, actuated, rates })
    }

    pub fn label(&self) -> &str {
        self.instance.label()
    }

    pub fn instance(&self) -> &ConditionInstance {
        &self.instance
    }

    pub fn control_dim(&self) -> usize {
        self.actuated.len()
    }

    /// Plant seen by this barrier at the current blackboard state.
    pub fn plant(&self, bb: &Blackboard) -> Result<IntegratorPlant, ConditionFault> {
        let n = self.instance.spec().state_dim;
        let timeout = self.instance.spec().staleness_timeout;
        let mut drift = vec![0.0; n];
        for r in &self.rates {
            drift[r.state] = component(&read_fresh(bb, &r.channel, timeout)?, &r.channel, r.component)?;
        }
        Ok(IntegratorPlant::actuating(n, self.actuated.clone())
            .and_then(|p| p.with_drift(drift))
            .expect("checked in new"))
    }

    /// The CBF condition `a·u + c ≥ 0` at the current state. `Ok(None)` when
    /// the control has no first-order effect but `h` is not decreasing.
    pub fn constraint(&self, bb: &Blackboard) -> Result<Option<LinearConstraint>, FilterFault> {
        let label = || self.label().to_owned();
        let state = |fault| FilterFault::State { barrier: label(), fault };
        let x = self.instance.assemble_state(bb).map_err(state)?;
        let plant = self.plant(bb).map_err(state)?;
        let gain = self.instance.spec().alpha_gain;
        match cbf_constraint(self.instance.expr(), &x, self.instance.params(), &plant, gain) {
            Ok(c) => Ok(Some(c)),
            Err(ConstraintError::RelativeDegree { drift_term, .. }) if drift_term >= 0.0 => Ok(None),
            Err(ConstraintError::RelativeDegree { drift_term, .. }) => {
                Err(FilterFault::LostControl { barrier: label(), drift_term })
            }
            Err(error) => Err(FilterFault::Constraint { barrier: label(), error }),
        }
    }
}

impl InputBarrier {
    pub fn new(instance: ConditionInstance, control_dim: usize) -> Result<Self, FilterError> {
        let spec = instance.spec();
        let mut axes = vec![0; spec.state_dim];
        for b in &spec.channel_bindings {
            if b.component >= control_dim {
                return Err(FilterError::Config {
                    barrier: instance.label().to_owned(),
                    message: format!(
                        "x[{}] reads command axis {} of a {control_dim}-axis command",
                        b.state, b.component
                    ),
                });
            }
            axes[b.state] = b.component;
        }
        Ok(InputBarrier { instance, axes })
    }

    pub fn label(&self) -> &str {
        self.instance.label()
    }

    pub fn instance(&self) -> &ConditionInstance {
        &self.instance
    }

    /// `h(u)` and its gradient with respect to `u`.
    pub fn eval(&self, u: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let x: Vec<f64> = self.axes.iter().map(|&j| u[j]).collect();
        let (h, gx) = eval_with_gradient(self.instance.expr(), &x, self.instance.params())?;
        let mut gu = vec![0.0; u.len()];
        for (i, &j) in self.axes.iter().enumerate() {
            gu[j] += gx[i];
        }
        Ok((h, gu))
    }

    /// Supporting cut separating the infeasible point `v`. When `h(0) ≥ 0` the
    /// cut is the tangent at the boundary point on the segment from 0 to `v`,
    /// otherwise the tangent at `v` itself.
    fn cut(&self, v: &[f64], h_origin: Option<f64>) -> Result<LinearConstraint, EvalError> {
        let mut point = v.to_vec();
        if h_origin.is_some_and(|h| h >= 0.0) {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let w: Vec<f64> = v.iter().map(|x| x * mid).collect();
                if self.eval(&w)?.0 >= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            point = v.iter().map(|x| x * lo).collect();
        }
        let (h, g) = self.eval(&point)?;
        let c = h - g.iter().zip(&point).map(|(a, b)| a * b).sum::<f64>();
        Ok(LinearConstraint::new(g, c))
    }
}

/// The minimal-correction filter over a set of state and input barriers.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    control_dim: usize,
    state: Vec<StateBarrier>,
    input: Vec<InputBarrier>,
    bounds: Option<BoxBounds>,
}

impl SafetyFilter {
    pub fn new(
        control_dim: usize,
        state: Vec<StateBarrier>,
        input: Vec<InputBarrier>,
        bounds: Option<BoxBounds>,
    ) -> Result<Self, FilterError> {
        for b in &state {
            if b.control_dim() != control_dim {
                return Err(FilterError::Config {
                    barrier: b.label().to_owned(),
                    message: format!("actuates {} axes, the command has {control_dim}", b.control_dim()),
                });
            }
        }
        Ok(SafetyFilter { control_dim, state, input, bounds })
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn state_barriers(&self) -> &[StateBarrier] {
        &self.state
    }

    pub fn input_barriers(&self) -> &[InputBarrier] {
        &self.input
    }

    /// Relative-degree check of every state barrier at the blackboard's
    /// current state, as done when a filtered action is instantiated.
    pub fn check(&self, bb: &Blackboard) -> Result<(), FilterError> {
        for b in &self.state {
            let x = b.instance.assemble_state(bb).map_err(|fault| FilterError::Probe {
                barrier: b.label().into(),
                fault: FilterFault::State { barrier: b.label().into(), fault },
            })?;
            let plant = b.plant(bb).map_err(|fault| FilterError::Probe {
                barrier: b.label().into(),
                fault: FilterFault::State { barrier: b.label().into(), fault },
            })?;
            match cbf_constraint(b.instance.expr(), &x, b.instance.params(), &plant, b.instance.spec().alpha_gain) {
                Ok(_) => {}
                Err(ConstraintError::RelativeDegree { norm, .. }) => {
                    return Err(FilterError::RelativeDegree { barrier: b.label().into(), norm })
                }
                Err(error) => {
                    return Err(FilterError::Probe {
                        barrier: b.label().into(),
                        fault: FilterFault::Constraint { barrier: b.label().into(), error },
                    })
                }
            }
        }
        Ok(())
    }

    /// Filter `u_nom` against the current blackboard state.
    pub fn filter(&self, bb: &Blackboard, u_nom: &[f64]) -> Result<FilterOutcome, FilterFault> {
        let mut constraints = Vec::new();
        for b in &self.state {
            if let Some(c) = b.constraint(bb)? {
                constraints.push((b.label().to_owned(), c));
            }
        }
        self.solve(u_nom, constraints)
    }

    /// Filter with explicit state constraints, used where no blackboard exists.
    pub fn solve(
        &self,
        u_nom: &[f64],
        mut constraints: Vec<(String, LinearConstraint)>,
    ) -> Result<FilterOutcome, FilterFault> {
        let origin: Vec<Option<f64>> =
            self.input.iter().map(|b| b.eval(&vec![0.0; self.control_dim]).ok().map(|(h, _)| h)).collect();
        let mut cuts = 0;
        loop {
            let rows: Vec<LinearConstraint> = constraints.iter().map(|(_, c)| c.clone()).collect();
            let result = qp_filter(u_nom, &rows, self.bounds.as_ref()).map_err(|e| match e {
                QpError::Infeasible { certificate } => FilterFault::Infeasible {
                    conflicting: certificate.iter().map(|r| describe(r, &constraints)).collect(),
                },
                e => FilterFault::Qp(e),
            })?;
            let mut violated = None;
            for (b, h0) in self.input.iter().zip(&origin) {
                let (h, _) = b.eval(&result.u_safe).map_err(|e| FilterFault::Constraint {
                    barrier: b.label().to_owned(),
                    error: ConstraintError::Eval(e),
                })?;
                if h < -CUT_TOL {
                    violated = Some((b, *h0));
                    break;
                }
            }
            let Some((b, h0)) = violated else {
                return Ok(outcome(result.u_safe, u_nom, result.active || cuts > 0, constraints));
            };
            if cuts == MAX_CUTS {
                let u = self.shrink(&result.u_safe, &constraints)?;
                return Ok(outcome(u, u_nom, true, constraints));
            }
            let cut = b.cut(&result.u_safe, h0).map_err(|e| FilterFault::Constraint {
                barrier: b.label().to_owned(),
                error: ConstraintError::Eval(e),
            })?;
            constraints.push((b.label().to_owned(), cut));
            cuts += 1;
        }
    }

    /// Scale `u` toward zero until every input barrier holds, provided zero
    /// itself is admissible.
    fn shrink(&self, u: &[f64], constraints: &[(String, LinearConstraint)]) -> Result<Vec<f64>, FilterFault> {
        let zero = vec![0.0; self.control_dim];
        let holds = |v: &[f64]| self.input.iter().all(|b| b.eval(v).is_ok_and(|(h, _)| h >= 0.0));
        let zero_ok = holds(&zero) && constraints.iter().all(|(_, c)| c.slack(&zero) >= -FEASIBILITY_TOL);
        if !zero_ok {
            return Err(FilterFault::Infeasible {
                conflicting: self.input.iter().map(|b| b.label().to_owned()).collect(),
            });
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let v: Vec<f64> = u.iter().map(|x| x * mid).collect();
            if holds(&v) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(u.iter().map(|x| x * lo).collect())
    }

    /// Whether the zero command satisfies every barrier at the current state.
    pub fn zero_is_safe(&self, bb: &Blackboard) -> bool {
        let zero = vec![0.0; self.control_dim];
        let state_ok = self.state.iter().all(|b| match b.constraint(bb) {
            Ok(Some(c)) => c.slack(&zero) >= -FEASIBILITY_TOL,
            Ok(None) => true,
            Err(_) => false,
        });
        let bounds_ok =
            self.bounds.as_ref().is_none_or(|bx| bx.lo.iter().zip(&bx.hi).all(|(l, h)| *l <= 0.0 && 0.0 <= *h));
        let input_ok = self.input.iter().all(|b| b.eval(&zero).is_ok_and(|(h, _)| h >= 0.0));
        state_ok && bounds_ok && input_ok
    }
}

fn describe(r: &ConstraintRef, constraints: &[(String, LinearConstraint)]) -> String {
    match r {
        ConstraintRef::Linear(i) => constraints.get(*i).map_or_else(|| r.to_string(), |(name, _)| name.clone()),
        _ => r.to_string(),
    }
}

fn outcome(
    u_safe: Vec<f64>,
    u_nom: &[f64],
    active: bool,
    constraints: Vec<(String, LinearConstraint)>,
) -> FilterOutcome {
    let correction = u_safe.iter().zip(u_nom).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    FilterOutcome { u_safe, correction, active, constraints }
}

/// Wraps an action so its command passes through a [`SafetyFilter`].
///
/// The inner status is returned unchanged. When no safe command exists the
/// zero command is published; the action keeps its status if zero is safe
/// and fails otherwise.
pub struct FilteredAction {
    inner: Box<dyn Leaf>,
    filter: Arc<SafetyFilter>,
}

impl fmt::Debug for FilteredAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilteredAction").field("filter", &self.filter).finish_non_exhaustive()
    }
}

impl FilteredAction {
    pub fn new(inner: Box<dyn Leaf>, filter: Arc<SafetyFilter>) -> Self {
        FilteredAction { inner, filter }
    }

    /// As [`new`](Self::new), rejecting barriers that fail the
    /// relative-degree check at the blackboard's current state.
    pub fn checked(inner: Box<dyn Leaf>, filter: Arc<SafetyFilter>, probe: &Blackboard) -> Result<Self, FilterError> {
        filter.check(probe)?;
        Ok(FilteredAction::new(inner, filter))
    }
}

impl Leaf for FilteredAction {
    fn tick(&mut self, ctx: &mut TickContext<'_>) -> Result<NodeStatus, LeafError> {
        let earlier = ctx.take_command();
        let status = self.inner.tick(ctx)?;
        let Some(u_nom) = ctx.take_command() else {
            if let Some(u) = earlier {
                ctx.set_command(u);
            }
            return Ok(status);
        };
        ctx.set_nominal(u_nom.clone());
        match self.filter.filter(ctx.blackboard(), &u_nom) {
            Ok(out) => {
                ctx.set_command(out.u_safe);
                Ok(status)
            }
            Err(fault) => {
                ctx.set_command(vec![0.0; u_nom.len()]);
                let zero_safe =
                    !matches!(fault, FilterFault::State { .. }) && self.filter.zero_is_safe(ctx.blackboard());
                if zero_safe {
                    ctx.note(format!("{fault}; holding position"));
                    Ok(status)
                } else {
                    Err(LeafError::new(fault.to_string()))
                }
            }
        }
    }

    fn halt(&mut self) {
        self.inner.halt();
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::bt::{LeafRegistry, Tree, TreeNode};
    use crate::cbf::Params;
    use crate::safety::spec::{builtin_spec, BarrierSpec};

    fn human_barrier() -> StateBarrier {
        let spec = Arc::new(builtin_spec("human_distance").unwrap());
        let channels = BTreeMap::from([
            ("robot".to_owned(), "robot/pos".to_owned()),
            ("human".to_owned(), "human/pos".to_owned()),
        ]);
        let inst = ConditionInstance::new("human", spec, &Params::new(), &channels).unwrap();
        let rates = vec![
            RateBinding { state: 2, channel: "human/vel".into(), component: 0 },
            RateBinding { state: 3, channel: "human/vel".into(), component: 1 },
        ];
        StateBarrier::new(inst, vec![0, 1], rates).unwrap()
    }

    fn speed_barrier(vmax: f64) -> InputBarrier {
        let spec = Arc::new(builtin_spec("speed_limit").unwrap());
        let channels = BTreeMap::from([("cmd".to_owned(), "robot/cmd_vel".to_owned())]);
        let inst = ConditionInstance::new("speed", spec, &[("vmax".to_owned(), vmax)].into(), &channels).unwrap();
        InputBarrier::new(inst, 2).unwrap()
    }

    fn board(robot: [f64; 2], human: [f64; 2]) -> Blackboard {
        let bb = Blackboard::new();
        bb.publish("robot/pos", 0.0, robot.to_vec()).unwrap();
        bb.publish("human/pos", 0.0, human.to_vec()).unwrap();
        bb.publish("human/vel", 0.0, vec![0.0, 0.0]).unwrap();
        bb
    }

    #[test]
    fn safe_nominal_passes_unchanged() {
        let f = SafetyFilter::new(2, vec![human_barrier()], vec![], None).unwrap();
        let out = f.filter(&board([0.0, 0.0], [3.0, 0.0]), &[-0.3, 0.7]).unwrap();
        assert_eq!(out.u_safe, vec![-0.3, 0.7]);
        assert!(!out.active);
    }

    #[test]
    fn nominal_toward_human_is_deflected() {
        let f = SafetyFilter::new(2, vec![human_barrier()], vec![], None).unwrap();
        let bb = board([0.0, 0.0], [1.2, 0.0]);
        let out = f.filter(&bb, &[2.0, 0.5]).unwrap();
        assert!(out.active);
        assert!(out.u_safe[0] < 2.0);
        for (_, c) in &out.constraints {
            assert!(c.slack(&out.u_safe) >= -1e-8);
        }
    }

    #[test]
    fn speed_limit_is_enforced_by_cuts() {
        let f = SafetyFilter::new(2, vec![], vec![speed_barrier(1.0)], None).unwrap();
        let out = f.solve(&[3.0, 4.0], vec![]).unwrap();
        let n = (out.u_safe[0].powi(2) + out.u_safe[1].powi(2)).sqrt();
        assert!(n <= 1.0 + 1e-9, "{n}");
        assert!((n - 1.0).abs() < 1e-6);
        assert!((out.u_safe[0] / out.u_safe[1] - 0.75).abs() < 1e-6);
        let slow = f.solve(&[0.3, 0.4], vec![]).unwrap();
        assert_eq!(slow.u_safe, vec![0.3, 0.4]);
    }

    #[test]
    fn speed_limit_combined_with_a_half_plane() {
        let f = SafetyFilter::new(2, vec![], vec![speed_barrier(1.0)], None).unwrap();
        // u[0] ≤ 0.5
        let out = f.solve(&[2.0, 0.0], vec![("wall".into(), LinearConstraint::new(vec![-1.0, 0.0], 0.5))]).unwrap();
        assert!(out.u_safe[0] <= 0.5 + 1e-8);
        assert!(out.u_safe[0].hypot(out.u_safe[1]) <= 1.0 + 1e-9);
    }

    fn one_d(label: &str, expression: &str) -> StateBarrier {
        let mut spec: BarrierSpec = builtin_spec("battery_min").unwrap();
        spec.name = label.into();
        spec.expression = expression.into();
        spec.param_schema.clear();
        let channels = BTreeMap::from([("battery".to_owned(), "x".to_owned())]);
        let inst = ConditionInstance::new(label, Arc::new(spec), &Params::new(), &channels).unwrap();
        StateBarrier::new(inst, vec![0], vec![]).unwrap()
    }

    #[test]
    fn contradictory_barriers_fail_the_action() {
        // x ≥ 1 and -x ≥ 1 at x = 0: a·u + c with c = -1 for both
        let f = Arc::new(
            SafetyFilter::new(1, vec![one_d("above", "x[0] - 1"), one_d("below", "-x[0] - 1")], vec![], None).unwrap(),
        );
        let bb = Blackboard::new();
        bb.publish("x", 0.0, vec![0.0]).unwrap();
        let err = f.filter(&bb, &[0.0]).unwrap_err();
        assert!(matches!(&err, FilterFault::Infeasible { conflicting } if conflicting.len() == 2));

        let mut reg = LeafRegistry::new();
        let filter = f.clone();
        reg.register_action("move", move |_| {
            let inner = Box::new(|ctx: &mut TickContext<'_>| {
                ctx.set_command(vec![0.5]);
                Ok(NodeStatus::Running)
            });
            Ok(Box::new(FilteredAction::new(inner, filter.clone())))
        });
        let mut tree = Tree::new(TreeNode::action("move").unwrap(), &reg).unwrap();
        let (s, rec) = tree.tick(&bb);
        assert_eq!(s, NodeStatus::Failure);
        assert_eq!(rec.command, Some(vec![0.0]));
        assert_eq!(rec.nominal, Some(vec![0.5]));
        assert!(rec.faults[0].error.contains("above"));
    }

    #[test]
    fn constant_barrier_is_rejected_at_instantiation() {
        let f = Arc::new(SafetyFilter::new(1, vec![one_d("flat", "2")], vec![], None).unwrap());
        let bb = Blackboard::new();
        bb.publish("x", 0.0, vec![0.0]).unwrap();
        let inner = Box::new(|_: &mut TickContext<'_>| Ok(NodeStatus::Success));
        assert!(matches!(FilteredAction::checked(inner, f, &bb), Err(FilterError::RelativeDegree { .. })));
    }

    #[test]
    fn stale_state_stops_the_robot() {
        let f = Arc::new(SafetyFilter::new(2, vec![human_barrier()], vec![], None).unwrap());
        let bb = board([0.0, 0.0], [3.0, 0.0]);
        bb.set_clock(1.0).unwrap();
        let inner = Box::new(|ctx: &mut TickContext<'_>| {
            ctx.set_command(vec![1.0, 0.0]);
            Ok(NodeStatus::Running)
        });
        let mut action = FilteredAction::new(inner, f);
        let mut ctx = TickContext::new(&bb);
        assert!(action.tick(&mut ctx).is_err());
        assert_eq!(ctx.command(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn moving_human_enters_the_offset() {
        let b = human_barrier();
        let bb = Blackboard::new();
        bb.publish("robot/pos", 0.0, vec![0.0, 0.0]).unwrap();
        bb.publish("human/pos", 0.0, vec![2.0, 0.0]).unwrap();
        bb.publish("human/vel", 0.0, vec![-1.0, 0.0]).unwrap();
        // ∇h = (-4, 0, 4, 0); c = 4·(-1) + 1·3
        assert_eq!(b.constraint(&bb).unwrap(), Some(LinearConstraint::new(vec![-4.0, 0.0], -1.0)));
    }
}
