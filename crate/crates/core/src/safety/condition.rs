//! Barrier specs instantiated as behavior-tree condition leaves.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{Map, Value};
use thiserror::Error;

use super::spec::{validate_spec, BarrierLibrary, BarrierSpec, LibraryError, SpecViolation};
use crate::bt::{Blackboard, Leaf, LeafError, LeafRegistry, NodeKind, NodeStatus, TickContext, TreeError, TreeNode};
use crate::cbf::{eval_barrier, parse_barrier, EvalError, Expr, Params};

/// Leaf implementation key used by barrier condition nodes.
pub const BARRIER_LEAF: &str = "barrier";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstantiationError {
    #[error("invalid spec: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidSpec(Vec<SpecViolation>),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("parameter `{0}` is not declared by the spec")]
    UnknownParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` = {value} is outside its declared range")]
    ParamOutOfRange { name: String, value: f64 },
    #[error("channel parameter `{0}` is not bound to a channel")]
    UnboundChannel(String),
    #[error("channel parameter `{0}` is not used by the spec")]
    UnknownChannel(String),
    #[error("malformed condition node: {0}")]
    Node(String),
}

/// Why a condition could not establish safety this tick.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditionFault {
    #[error("channel `{channel}` has no data")]
    Absent { channel: String },
    #[error("channel `{channel}` is stale: age {age:.3}s exceeds {timeout}s")]
    Stale { channel: String, age: f64, timeout: f64 },
    #[error("channel `{channel}` has {len} component(s), component {component} requested")]
    Component { channel: String, component: usize, len: usize },
    #[error("{0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
struct BoundState {
    state: usize,
    channel: String,
    component: usize,
}

/// A spec with every parameter and channel resolved.
#[derive(Debug, Clone)]
pub struct ConditionInstance {
    label: String,
    spec: Arc<BarrierSpec>,
    expr: Expr,
    params: Params,
    channels: BTreeMap<String, String>,
    sources: Vec<BoundState>,
}

impl ConditionInstance {
    /// `params` override the spec defaults; `channels` maps every channel
    /// parameter of the spec to a concrete channel name.
    pub fn new(
        label: &str,
        spec: Arc<BarrierSpec>,
        params: &Params,
        channels: &BTreeMap<String, String>,
    ) -> Result<Self, InstantiationError> {
        validate_spec(&spec).map_err(InstantiationError::InvalidSpec)?;
        let expr = parse_barrier(&spec.expression).expect("validated");
        let mut bound = spec.defaults();
        for (name, &value) in params {
            let decl = spec.param(name).ok_or_else(|| InstantiationError::UnknownParam(name.clone()))?;
            if !decl.contains(value) {
                return Err(InstantiationError::ParamOutOfRange { name: name.clone(), value });
            }
            bound.insert(name.clone(), value);
        }
        if let Some(missing) = spec.param_schema.iter().find(|p| !bound.contains_key(&p.name)) {
            return Err(InstantiationError::MissingParam(missing.name.clone()));
        }
        let wanted = spec.channel_params();
        if let Some(extra) = channels.keys().find(|k| !wanted.contains(&k.as_str())) {
            return Err(InstantiationError::UnknownChannel(extra.clone()));
        }
        let mut sources = Vec::with_capacity(spec.channel_bindings.len());
        for b in &spec.channel_bindings {
            let channel = channels
                .get(&b.channel)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| InstantiationError::UnboundChannel(b.channel.clone()))?;
            sources.push(BoundState { state: b.state, channel: channel.clone(), component: b.component });
        }
        sources.sort_by_key(|s| s.state);
        Ok(ConditionInstance {
            label: label.to_owned(),
            spec,
            expr,
            params: bound,
            channels: channels.clone(),
            sources,
        })
    }

    /// Instance with spec defaults and an identity channel mapping
    /// (channel parameter `robot` reads channel `robot`).
    pub fn with_defaults(label: &str, spec: Arc<BarrierSpec>) -> Result<Self, InstantiationError> {
        let channels = spec.channel_params().into_iter().map(|c| (c.to_owned(), c.to_owned())).collect();
        ConditionInstance::new(label, spec, &Params::new(), &channels)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn spec(&self) -> &BarrierSpec {
        &self.spec
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn channels(&self) -> &BTreeMap<String, String> {
        &self.channels
    }

    /// Read the state vector from the blackboard, rejecting absent or stale data.
    pub fn assemble_state(&self, bb: &Blackboard) -> Result<Vec<f64>, ConditionFault> {
        let mut x = vec![0.0; self.spec.state_dim];
        let mut cache: Vec<(&str, Vec<f64>)> = Vec::new();
        for s in &self.sources {
            let value = match cache.iter().position(|(c, _)| *c == s.channel) {
                Some(i) => &cache[i].1,
                None => {
                    let v = read_fresh(bb, &s.channel, self.spec.staleness_timeout)?;
                    cache.push((&s.channel, v));
                    &cache.last().expect("just pushed").1
                }
            };
            x[s.state] = component(value, &s.channel, s.component)?;
        }
        Ok(x)
    }

    pub fn evaluate(&self, bb: &Blackboard) -> Result<f64, ConditionFault> {
        let x = self.assemble_state(bb)?;
        Ok(eval_barrier(&self.expr, &x, &self.params)?)
    }

    /// `Success` iff data is fresh, evaluation succeeds and `h ≥ margin`.
    /// Never `Running`.
    pub fn status(&self, bb: &Blackboard) -> Result<NodeStatus, ConditionFault> {
        let h = self.evaluate(bb)?;
        Ok(if h >= self.spec.margin { NodeStatus::Success } else { NodeStatus::Failure })
    }

    /// Condition node document for this instance, named by its label.
    pub fn to_node(&self) -> Result<TreeNode, TreeError> {
        let mut params = BTreeMap::new();
        params.insert("type".to_owned(), Value::from(BARRIER_LEAF));
        params.insert("spec".to_owned(), Value::from(self.spec.id()));
        let p: Map<String, Value> = self.params.iter().map(|(k, v)| (k.clone(), Value::from(*v))).collect();
        params.insert("params".to_owned(), Value::Object(p));
        let c: Map<String, Value> = self.channels.iter().map(|(k, v)| (k.clone(), Value::from(v.clone()))).collect();
        params.insert("channels".to_owned(), Value::Object(c));
        TreeNode::leaf(NodeKind::Condition, &self.label, params)
    }

    /// Inverse of [`to_node`](Self::to_node), resolving the spec in `library`.
    pub fn from_node(node: &TreeNode, library: &BarrierLibrary) -> Result<Self, InstantiationError> {
        let bad = |m: &str| InstantiationError::Node(format!("{}: {m}", node.name()));
        let spec = node.param("spec").and_then(Value::as_str).ok_or_else(|| bad("missing string parameter `spec`"))?;
        let spec = library.resolve(spec)?;
        let mut params = Params::new();
        if let Some(p) = node.param("params") {
            let obj = p.as_object().ok_or_else(|| bad("`params` must be an object"))?;
            for (k, v) in obj {
                let v = v.as_f64().ok_or_else(|| bad(&format!("parameter `{k}` must be a number")))?;
                params.insert(k.clone(), v);
            }
        }
        let mut channels = BTreeMap::new();
        if let Some(c) = node.param("channels") {
            let obj = c.as_object().ok_or_else(|| bad("`channels` must be an object"))?;
            for (k, v) in obj {
                let v = v.as_str().ok_or_else(|| bad(&format!("channel `{k}` must be a string")))?;
                channels.insert(k.clone(), v.to_owned());
            }
        }
        ConditionInstance::new(node.name(), spec, &params, &channels)
    }
}

/// Latest value of `channel`, provided it is no older than `timeout` seconds.
pub(crate) fn read_fresh(bb: &Blackboard, channel: &str, timeout: f64) -> Result<Vec<f64>, ConditionFault> {
    let sample = bb.read(channel).ok_or_else(|| ConditionFault::Absent { channel: channel.to_owned() })?;
    let age = bb.now() - sample.stamp;
    if age > timeout {
        return Err(ConditionFault::Stale { channel: channel.to_owned(), age, timeout });
    }
    Ok(sample.value)
}

pub(crate) fn component(value: &[f64], channel: &str, index: usize) -> Result<f64, ConditionFault> {
    value.get(index).copied().ok_or_else(|| ConditionFault::Component {
        channel: channel.to_owned(),
        component: index,
        len: value.len(),
    })
}

/// Condition leaf backed by a [`ConditionInstance`]. Faults are reported as
/// leaf errors, which the engine turns into `Failure`.
pub struct ConditionLeaf(pub ConditionInstance);

impl Leaf for ConditionLeaf {
    fn tick(&mut self, ctx: &mut TickContext<'_>) -> Result<NodeStatus, LeafError> {
        match self.0.evaluate(ctx.blackboard()) {
            Ok(h) => {
                ctx.record_barrier(&self.0.label, Some(h));
                Ok(if h >= self.0.spec.margin { NodeStatus::Success } else { NodeStatus::Failure })
            }
            Err(fault) => {
                ctx.record_barrier(&self.0.label, None);
                Err(LeafError::new(fault.to_string()))
            }
        }
    }
}

/// Register the `barrier` condition implementation backed by `library`.
pub fn register_barrier_conditions(registry: &mut LeafRegistry, library: &BarrierLibrary) {
    let library = library.clone();
    registry.register_condition(BARRIER_LEAF, move |node| {
        ConditionInstance::from_node(node, &library)
            .map(|inst| Box::new(ConditionLeaf(inst)) as Box<dyn Leaf>)
            .map_err(|e| e.to_string())
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt::Tree;
    use crate::safety::spec::builtin_spec;

    fn human(dmin: f64) -> ConditionInstance {
        let spec = Arc::new(builtin_spec("human_distance").unwrap());
        let channels = [("robot", "robot/pos"), ("human", "human/pos")]
            .into_iter()
            .map(|(a, b)| (a.to_owned(), b.to_owned()))
            .collect();
        ConditionInstance::new("human_far", spec, &[("dmin".to_owned(), dmin)].into(), &channels).unwrap()
    }

    fn board(robot: [f64; 2], human: [f64; 2], human_stamp: f64, now: f64) -> Blackboard {
        let bb = Blackboard::new();
        bb.publish("robot/pos", now, robot.to_vec()).unwrap();
        bb.publish("human/pos", human_stamp, human.to_vec()).unwrap();
        bb.set_clock(now).unwrap();
        bb
    }

    #[test]
    fn far_human_is_safe() {
        let c = human(1.0);
        let bb = board([0.0, 0.0], [3.0, 4.0], 0.0, 0.0);
        assert_eq!(c.evaluate(&bb).unwrap(), 24.0);
        assert_eq!(c.status(&bb).unwrap(), NodeStatus::Success);
    }

    #[test]
    fn near_human_is_unsafe() {
        let c = human(1.0);
        let bb = board([0.0, 0.0], [0.5, 0.0], 0.0, 0.0);
        assert_eq!(c.evaluate(&bb).unwrap(), -0.75);
        assert_eq!(c.status(&bb).unwrap(), NodeStatus::Failure);
    }

    #[test]
    fn stale_and_absent_channels_fail() {
        let c = human(1.0);
        let bb = board([0.0, 0.0], [3.0, 4.0], 0.0, 0.5);
        assert!(matches!(c.status(&bb), Err(ConditionFault::Stale { .. })));
        let bb = board([0.0, 0.0], [3.0, 4.0], 0.3, 0.5);
        assert_eq!(c.status(&bb).unwrap(), NodeStatus::Success);
        let bb = Blackboard::new();
        bb.publish("robot/pos", 0.0, vec![0.0, 0.0]).unwrap();
        assert_eq!(c.status(&bb), Err(ConditionFault::Absent { channel: "human/pos".into() }));
        let bb = Blackboard::new();
        bb.publish("robot/pos", 0.0, vec![0.0]).unwrap();
        bb.publish("human/pos", 0.0, vec![0.0, 0.0]).unwrap();
        assert!(matches!(c.status(&bb), Err(ConditionFault::Component { component: 1, .. })));
    }

    #[test]
    fn instantiation_errors() {
        let spec = Arc::new(builtin_spec("human_distance").unwrap());
        let chans: BTreeMap<String, String> = [("robot".to_owned(), "r".to_owned())].into();
        assert_eq!(
            ConditionInstance::new("c", spec.clone(), &Params::new(), &chans).unwrap_err(),
            InstantiationError::UnboundChannel("human".into())
        );
        let mut full = chans.clone();
        full.insert("human".into(), "h".into());
        assert!(matches!(
            ConditionInstance::new("c", spec.clone(), &[("dmin".to_owned(), -1.0)].into(), &full),
            Err(InstantiationError::ParamOutOfRange { .. })
        ));
        assert!(matches!(
            ConditionInstance::new("c", spec.clone(), &[("speed".to_owned(), 1.0)].into(), &full),
            Err(InstantiationError::UnknownParam(_))
        ));
        full.insert("lidar".into(), "l".into());
        assert!(matches!(
            ConditionInstance::new("c", spec.clone(), &Params::new(), &full),
            Err(InstantiationError::UnknownChannel(_))
        ));
        let mut required = (*spec).clone();
        required.param_schema[0].default = None;
        assert_eq!(
            ConditionInstance::with_defaults("c", Arc::new(required)).unwrap_err(),
            InstantiationError::MissingParam("dmin".into())
        );
    }

    #[test]
    fn node_round_trip_through_a_tree() {
        let c = human(1.5);
        let node = c.to_node().unwrap();
        let back = ConditionInstance::from_node(&node, &BarrierLibrary::with_builtins()).unwrap();
        assert_eq!(back.params(), c.params());
        assert_eq!(back.channels(), c.channels());

        let mut reg = LeafRegistry::new();
        register_barrier_conditions(&mut reg, &BarrierLibrary::with_builtins());
        let mut tree = Tree::new(node, &reg).unwrap();
        let bb = board([0.0, 0.0], [1.0, 0.0], 0.0, 0.0);
        let (s, rec) = tree.tick(&bb);
        assert_eq!(s, NodeStatus::Failure);
        assert_eq!(rec.barriers["human_far"], Some(1.0 - 2.25));
        assert!(rec.faults.is_empty());
        let (s, rec) = tree.tick(&Blackboard::new());
        assert_eq!(s, NodeStatus::Failure);
        assert_eq!(rec.barriers["human_far"], None);
        assert_eq!(rec.faults.len(), 1);
    }
}
