//! Fixed-rate scenario loop: publish, tick, apply, record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::actions::{build_action, SIM_ACTIONS};
use super::cell::{human_position, step_plant, CellState, Waypoint};
use super::scenario::{SafetyConfig, Scenario, ScenarioError};
use crate::bt::{BindError, Blackboard, LeafRegistry, NodeKind, NodeStatus, Tree, TreeNode};
use crate::cbf::BoxBounds;
use crate::safety::{
    register_barrier_conditions, BarrierLibrary, ConditionInstance, FilterError, FilteredAction, InputBarrier,
    InstantiationError, LibraryError, RateBinding, SafetyFilter, StateBarrier, BARRIER_LEAF,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error("barrier `{name}`: {source}")]
    Library { name: String, source: LibraryError },
    #[error("barrier `{name}`: {source}")]
    Instantiation { name: String, source: InstantiationError },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("invalid safety configuration: {0}")]
    Config(String),
    #[error("writing trace: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFault {
    pub node: String,
    pub error: String,
}

/// One line of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub time: f64,
    pub robot: [f64; 2],
    pub human: [f64; 2],
    pub battery: f64,
    pub status: NodeStatus,
    /// Every ticked node in tick order.
    pub statuses: Vec<(String, NodeStatus)>,
    /// Every configured barrier; `null` when it could not be evaluated.
    pub h: BTreeMap<String, Option<f64>>,
    pub u_nom: Option<Vec<f64>>,
    /// The command applied to the plant.
    pub u_safe: [f64; 2],
    pub faults: Vec<TraceFault>,
    pub halted: Vec<String>,
    pub notes: Vec<String>,
}

impl TraceRecord {
    pub fn status_of(&self, node: &str) -> Option<NodeStatus> {
        self.statuses.iter().find(|(n, _)| n == node).map(|(_, s)| *s)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }

    pub fn correction(&self) -> Option<f64> {
        let u = self.u_nom.as_ref()?;
        Some(u.iter().zip(self.u_safe).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

enum Monitor {
    State(ConditionInstance),
    Input(InputBarrier),
}

/// Plant, human and channel bus.
struct Cell {
    scenario: Scenario,
    path: Vec<Waypoint>,
    bb: Blackboard,
    state: CellState,
    last_cmd: [f64; 2],
    rng: ChaCha8Rng,
    tick: u64,
}

impl Cell {
    fn time(&self, tick: u64) -> f64 {
        self.scenario.initial.time + tick as f64 * self.scenario.dt()
    }

    fn noisy(&mut self, p: [f64; 2]) -> Vec<f64> {
        let n = self.scenario.sensor_noise;
        if n == 0.0 {
            return p.to_vec();
        }
        p.iter().map(|v| v + self.rng.random_range(-n..=n)).collect()
    }

    fn publish(&mut self) {
        let t = self.time(self.tick);
        let dt = self.scenario.dt();
        let local = t - self.scenario.initial.time;
        let human = human_position(&self.path, local);
        let next = human_position(&self.path, local + dt);
        self.state.human = human;
        self.state.time = t;
        let ch = self.scenario.channels.clone();
        let robot = self.noisy(self.state.robot);
        let seen = self.noisy(human);
        let vel = vec![(next[0] - human[0]) / dt, (next[1] - human[1]) / dt];
        let bb = &self.bb;
        let ok = bb.publish(&ch.robot_pos, t, robot).is_ok()
            && bb.publish(&ch.battery, t, vec![self.state.battery]).is_ok()
            && bb.publish(&ch.human_pos, t, seen).is_ok()
            && bb.publish(&ch.human_vel, t, vel).is_ok()
            && bb.publish(&ch.cmd_vel, t, self.last_cmd.to_vec()).is_ok()
            && bb.set_clock(t).is_ok();
        debug_assert!(ok, "simulation time is monotonic");
    }
}

/// A scenario bound to a tree, advanced one tick at a time.
pub struct Simulation {
    cell: Cell,
    tree: Tree,
    monitors: Vec<(String, Monitor)>,
}

impl Simulation {
    /// Bind `tree` with the simulator actions and the barrier conditions of
    /// `library`, and instantiate the safety filter from `safety`.
    pub fn new(
        scenario: &Scenario,
        tree: &TreeNode,
        safety: &SafetyConfig,
        library: &BarrierLibrary,
    ) -> Result<Self, RunError> {
        scenario.validate()?;
        let dt = scenario.dt();
        let mut cell = Cell {
            scenario: scenario.clone(),
            path: scenario.human_path(),
            bb: Blackboard::new(),
            state: scenario.initial,
            last_cmd: [0.0, 0.0],
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            tick: 0,
        };
        cell.publish();

        let mut monitors = Vec::new();
        let mut found = Vec::new();
        tree.visit(&mut |n| {
            if n.kind() == NodeKind::Condition && LeafRegistry::leaf_key(n) == BARRIER_LEAF {
                found.push(n);
            }
        });
        for node in found {
            let inst = ConditionInstance::from_node(node, library)
                .map_err(|source| RunError::Instantiation { name: node.name().to_owned(), source })?;
            monitors.push((node.name().to_owned(), Monitor::State(inst)));
        }

        let resolve = |name: &str, spec: &str| {
            library.resolve(spec).map_err(|source| RunError::Library { name: name.to_owned(), source })
        };
        let instantiate = |name: &str, spec, params, channels| {
            ConditionInstance::new(name, spec, params, channels)
                .map_err(|source| RunError::Instantiation { name: name.to_owned(), source })
        };
        let mut state_barriers = Vec::new();
        for c in &safety.state_barriers {
            let inst = instantiate(&c.name, resolve(&c.name, &c.spec)?, &c.params, &c.channels)?;
            let rates = c
                .rates
                .iter()
                .map(|r| RateBinding { state: r.state, channel: r.channel.clone(), component: r.component })
                .collect();
            monitors.push((c.name.clone(), Monitor::State(inst.clone())));
            state_barriers.push(StateBarrier::new(inst, c.actuated.clone(), rates)?);
        }
        let mut input_barriers = Vec::new();
        for c in &safety.input_barriers {
            let inst = instantiate(&c.name, resolve(&c.name, &c.spec)?, &c.params, &c.channels)?;
            let barrier = InputBarrier::new(inst, 2)?;
            monitors.push((c.name.clone(), Monitor::Input(barrier.clone())));
            input_barriers.push(barrier);
        }
        for (i, (name, _)) in monitors.iter().enumerate() {
            if monitors[..i].iter().any(|(n, _)| n == name) {
                return Err(RunError::Config(format!("barrier label `{name}` is used twice")));
            }
        }

        let bounds = match safety.u_box {
            Some(l) if l > 0.0 && l.is_finite() => Some(BoxBounds::symmetric(2, l)),
            Some(l) => return Err(RunError::Config(format!("u_box must be positive, got {l}"))),
            None => None,
        };
        let filter = if safety.filter_enabled {
            let filter = SafetyFilter::new(2, state_barriers, input_barriers, bounds)?;
            filter.check(&cell.bb)?;
            Some(Arc::new(filter))
        } else {
            None
        };

        let mut registry = LeafRegistry::new();
        register_barrier_conditions(&mut registry, library);
        for key in SIM_ACTIONS {
            let channels = scenario.channels.clone();
            let goal = scenario.goal;
            let filter = filter.clone().filter(|_| safety.filtered_actions.contains(key));
            registry.register_action(key, move |node| {
                let inner = build_action(key, node, &channels, goal, dt)?;
                Ok(match &filter {
                    Some(f) => Box::new(FilteredAction::new(inner, f.clone())),
                    None => inner,
                })
            });
        }
        let tree = Tree::new(tree.clone(), &registry)?;
        Ok(Simulation { cell, tree, monitors })
    }

    pub fn state(&self) -> &CellState {
        &self.cell.state
    }

    pub fn blackboard(&self) -> &Blackboard {
        &self.cell.bb
    }

    /// Labels of every barrier reported in the trace.
    pub fn barrier_labels(&self) -> Vec<&str> {
        let mut v: Vec<_> = self.monitors.iter().map(|(n, _)| n.as_str()).collect();
        v.sort_unstable();
        v
    }

    /// Run one cycle: publish (already done for tick 0), tick, apply, record.
    pub fn step(&mut self) -> TraceRecord {
        if self.cell.tick > 0 {
            self.cell.publish();
        }
        let before = self.cell.state;
        let (status, rec) = self.tree.tick(&self.cell.bb);
        let u = match rec.command.as_deref() {
            Some(&[x, y]) if x.is_finite() && y.is_finite() => [x, y],
            _ => [0.0, 0.0],
        };
        let h = self
            .monitors
            .iter()
            .map(|(name, m)| {
                let v = match m {
                    Monitor::State(inst) => inst.evaluate(&self.cell.bb).ok(),
                    Monitor::Input(b) => b.eval(&u).ok().map(|(h, _)| h),
                };
                (name.clone(), v)
            })
            .collect();
        let record = TraceRecord {
            tick: self.cell.tick,
            time: before.time,
            robot: before.robot,
            human: before.human,
            battery: before.battery,
            status,
            statuses: rec.statuses().map(|(n, s)| (n.to_owned(), s)).collect(),
            h,
            u_nom: rec.nominal.clone(),
            u_safe: u,
            faults: rec.faults.iter().map(|f| TraceFault { node: f.node.clone(), error: f.error.clone() }).collect(),
            halted: rec.halted.clone(),
            notes: rec.notes.clone(),
        };
        self.cell.state = step_plant(&self.cell.state, u, self.cell.scenario.dt(), self.cell.scenario.battery_drain);
        self.cell.last_cmd = u;
        self.cell.tick += 1;
        record
    }
}

/// Run the whole scenario, handing each record to `sink` as it is produced.
pub fn run_scenario_with(
    scenario: &Scenario,
    tree: &TreeNode,
    safety: &SafetyConfig,
    library: &BarrierLibrary,
    mut sink: impl FnMut(TraceRecord) -> io::Result<()>,
) -> Result<(), RunError> {
    let mut sim = Simulation::new(scenario, tree, safety, library)?;
    for _ in 0..scenario.ticks() {
        sink(sim.step())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTrace {
    pub records: Vec<TraceRecord>,
}

pub fn run_scenario(
    scenario: &Scenario,
    tree: &TreeNode,
    safety: &SafetyConfig,
    library: &BarrierLibrary,
) -> Result<ScenarioTrace, RunError> {
    let mut records = Vec::with_capacity(scenario.ticks() as usize);
    run_scenario_with(scenario, tree, safety, library, |r| {
        records.push(r);
        Ok(())
    })?;
    Ok(ScenarioTrace { records })
}

impl ScenarioTrace {
    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", r.to_json_line())?;
        }
        Ok(())
    }

    pub fn summary(&self) -> TraceSummary {
        let mut s = TraceSummary::default();
        for r in &self.records {
            s.add(r);
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BarrierStats {
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub samples: u64,
    /// Ticks on which the value was unavailable.
    pub missing: u64,
    /// Ticks with `h < 0`.
    pub negative: u64,
    #[serde(skip)]
    sum: f64,
}

/// Per-barrier and command-correction statistics over a trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub ticks: u64,
    pub barriers: BTreeMap<String, BarrierStats>,
    pub filtered_ticks: u64,
    /// Ticks where the applied command differs from the nominal one.
    pub corrected_ticks: u64,
    pub mean_correction: f64,
    pub max_correction: f64,
    pub faults: u64,
}

impl TraceSummary {
    pub fn add(&mut self, r: &TraceRecord) {
        self.ticks += 1;
        self.faults += r.faults.len() as u64;
        for (name, v) in &r.h {
            let b = self.barriers.entry(name.clone()).or_default();
            match v {
                Some(h) => {
                    b.samples += 1;
                    b.sum += h;
                    b.min = Some(b.min.map_or(*h, |m| m.min(*h)));
                    b.mean = Some(b.sum / b.samples as f64);
                    b.negative += u64::from(*h < 0.0);
                }
                None => b.missing += 1,
            }
        }
        if let Some(c) = r.correction() {
            let n = self.filtered_ticks as f64;
            self.filtered_ticks += 1;
            self.mean_correction = (self.mean_correction * n + c) / (n + 1.0);
            self.max_correction = self.max_correction.max(c);
            self.corrected_ticks += u64::from(c > 0.0);
        }
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.6}"));
        let mut out = String::new();
        let width = self.barriers.keys().map(String::len).max().unwrap_or(0).max("barrier".len());
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>14}  {:>8}  {:>8}  {:>8}",
            "barrier", "min_h", "mean_h", "samples", "missing", "negative"
        );
        for (name, b) in &self.barriers {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>14}  {:>14}  {:>8}  {:>8}  {:>8}",
                fmt(b.min),
                fmt(b.mean),
                b.samples,
                b.missing,
                b.negative
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "ticks            {}", self.ticks);
        let _ = writeln!(out, "nominal ticks    {}", self.filtered_ticks);
        let _ = writeln!(out, "corrected ticks  {}", self.corrected_ticks);
        let _ = writeln!(out, "mean correction  {:.6}", self.mean_correction);
        let _ = writeln!(out, "max correction   {:.6}", self.max_correction);
        let _ = writeln!(out, "leaf faults      {}", self.faults);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt::parse_tree;

    fn scenario(human_to: [f64; 2], speed: f64) -> Scenario {
        Scenario::from_json(&format!(
            r#"{{
                "initial": {{"robot": [0, 0], "battery": 1.0, "human": [6, 0]}},
                "human_waypoints": [{{"position": [{}, {}], "speed": {speed}}}],
                "battery_drain": 0.01,
                "goal": [8, 0],
                "rate": 20,
                "duration": 10,
                "seed": 3
            }}"#,
            human_to[0], human_to[1]
        ))
        .unwrap()
    }

    const CHASE: &str = r#"{"kind": "Action", "name": "chase_human"}"#;

    #[test]
    fn unfiltered_chase_reaches_the_human() {
        let s = scenario([6.0, 0.0], 0.0);
        let mut safety = s.safety_config();
        safety.filter_enabled = false;
        let trace = run_scenario(&s, &parse_tree(CHASE).unwrap(), &safety, &BarrierLibrary::with_builtins()).unwrap();
        assert_eq!(trace.records.len(), 200);
        let min = trace.summary().barriers["human_guard"].min.unwrap();
        assert!(min < 0.0);
    }

    #[test]
    fn filtered_chase_keeps_distance_from_a_walking_human() {
        let s = scenario([-6.0, 0.5], 0.5);
        let trace = run_scenario(&s, &parse_tree(CHASE).unwrap(), &s.safety_config(), &BarrierLibrary::with_builtins())
            .unwrap();
        let sum = trace.summary();
        assert!(sum.barriers["human_guard"].min.unwrap() >= -1e-9, "{sum:?}");
        assert!(sum.corrected_ticks > 0);
        for r in &trace.records {
            let d = (r.robot[0] - r.human[0]).hypot(r.robot[1] - r.human[1]);
            assert!(((d * d - 1.0) - r.h["human_guard"].unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = |s: &Scenario| {
            let t = run_scenario(s, &parse_tree(CHASE).unwrap(), &s.safety_config(), &BarrierLibrary::with_builtins())
                .unwrap();
            let mut buf = Vec::new();
            t.write_jsonl(&mut buf).unwrap();
            buf
        };
        let mut s = scenario([0.0, 0.0], 1.0);
        s.sensor_noise = 0.01;
        assert_eq!(run(&s), run(&s));
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(run(&s), run(&other));
    }

    #[test]
    fn relative_degree_is_checked_at_startup() {
        // robot starts on top of the human: ∇h vanishes
        let mut s = scenario([6.0, 0.0], 0.0);
        s.initial.human = [0.0, 0.0];
        let e = Simulation::new(&s, &parse_tree(CHASE).unwrap(), &s.safety_config(), &BarrierLibrary::with_builtins());
        assert!(matches!(e, Err(RunError::Filter(FilterError::RelativeDegree { .. }))));
    }

    #[test]
    fn summary_table_lists_barriers() {
        let s = scenario([6.0, 0.0], 0.0);
        let trace = run_scenario(&s, &parse_tree(CHASE).unwrap(), &s.safety_config(), &BarrierLibrary::with_builtins())
            .unwrap();
        let table = trace.summary().to_table();
        assert!(table.starts_with("barrier"));
        assert!(table.contains("human_guard"));
    }
}
