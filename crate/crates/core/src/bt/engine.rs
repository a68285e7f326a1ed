//! Reactive tick engine.
//!
//! Control-flow nodes are memoryless: every tick re-evaluates the tree from
//! the root, so conditions guarding an action are re-checked each cycle.
//! Leaves that reported `Running` on the previous tick and are skipped on
//! this one receive exactly one halt notification before `tick` returns.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use super::blackboard::Blackboard;
use super::node::{NodeKind, NodeStatus, TreeNode};

/// Internal error raised by a leaf. The engine reports the leaf as
/// `Failure` and attaches the error to the tick record.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct LeafError(pub String);

impl LeafError {
    pub fn new(msg: impl Into<String>) -> Self {
        LeafError(msg.into())
    }
}

/// Per-tick scratch space handed to every leaf.
pub struct TickContext<'a> {
    blackboard: &'a Blackboard,
    now: f64,
    command: Option<Vec<f64>>,
    nominal: Option<Vec<f64>>,
    barriers: BTreeMap<String, Option<f64>>,
    notes: Vec<String>,
}

impl<'a> TickContext<'a> {
    pub fn new(blackboard: &'a Blackboard) -> Self {
        TickContext {
            blackboard,
            now: blackboard.now(),
            command: None,
            nominal: None,
            barriers: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn blackboard(&self) -> &Blackboard {
        self.blackboard
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Publish a control command for this cycle. Later writers win.
    pub fn set_command(&mut self, u: Vec<f64>) {
        self.command = Some(u);
    }

    pub fn take_command(&mut self) -> Option<Vec<f64>> {
        self.command.take()
    }

    pub fn command(&self) -> Option<&[f64]> {
        self.command.as_deref()
    }

    /// Record the unfiltered command that produced this cycle's command.
    pub fn set_nominal(&mut self, u: Vec<f64>) {
        self.nominal = Some(u);
    }

    pub fn record_barrier(&mut self, name: &str, h: Option<f64>) {
        self.barriers.insert(name.to_owned(), h);
    }

    /// Diagnostics that are not errors, e.g. a filter falling back to a stop.
    pub fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }
}

pub trait Leaf: Send {
    fn tick(&mut self, ctx: &mut TickContext<'_>) -> Result<NodeStatus, LeafError>;

    /// Called when the leaf was `Running` on the previous tick and was not
    /// ticked on the current one.
    fn halt(&mut self) {}
}

impl<F> Leaf for F
where
    F: FnMut(&mut TickContext<'_>) -> Result<NodeStatus, LeafError> + Send,
{
    fn tick(&mut self, ctx: &mut TickContext<'_>) -> Result<NodeStatus, LeafError> {
        self(ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafFault {
    pub node: String,
    pub error: String,
}

/// Everything observable about one tick.
#[derive(Debug, Clone)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    names: Arc<[String]>,
    visits: Vec<(usize, NodeStatus)>,
    pub barriers: BTreeMap<String, Option<f64>>,
    pub nominal: Option<Vec<f64>>,
    pub command: Option<Vec<f64>>,
    pub faults: Vec<LeafFault>,
    pub halted: Vec<String>,
    pub notes: Vec<String>,
}

impl TickRecord {
    /// Status of every node ticked this cycle, in tick order.
    pub fn statuses(&self) -> impl Iterator<Item = (&str, NodeStatus)> + '_ {
        self.visits.iter().map(|&(i, s)| (self.names[i].as_str(), s))
    }

    /// Like [`statuses`](Self::statuses) but with nodes identified by their
    /// preorder index in the tree structure.
    pub fn visits(&self) -> &[(usize, NodeStatus)] {
        &self.visits
    }

    pub fn status_of(&self, name: &str) -> Option<NodeStatus> {
        self.statuses().find(|(n, _)| *n == name).map(|(_, s)| s)
    }

    pub fn was_ticked(&self, name: &str) -> bool {
        self.status_of(name).is_some()
    }

    pub fn ticked_count(&self) -> usize {
        self.visits.len()
    }
}

pub type LeafBuilder = Box<dyn Fn(&TreeNode) -> Result<Box<dyn Leaf>, String> + Send + Sync>;

/// Maps leaf implementation keys to constructors.
///
/// A leaf's key is its `type` parameter when present, otherwise its name,
/// so several nodes can share one implementation.
#[derive(Default)]
pub struct LeafRegistry {
    conditions: HashMap<String, LeafBuilder>,
    actions: HashMap<String, LeafBuilder>,
}

impl fmt::Debug for LeafRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut c: Vec<_> = self.conditions.keys().collect();
        let mut a: Vec<_> = self.actions.keys().collect();
        c.sort();
        a.sort();
        f.debug_struct("LeafRegistry").field("conditions", &c).field("actions", &a).finish()
    }
}

impl LeafRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_condition(
        &mut self,
        key: &str,
        build: impl Fn(&TreeNode) -> Result<Box<dyn Leaf>, String> + Send + Sync + 'static,
    ) {
        self.conditions.insert(key.to_owned(), Box::new(build));
    }

    pub fn register_action(
        &mut self,
        key: &str,
        build: impl Fn(&TreeNode) -> Result<Box<dyn Leaf>, String> + Send + Sync + 'static,
    ) {
        self.actions.insert(key.to_owned(), Box::new(build));
    }

    pub fn leaf_key(node: &TreeNode) -> &str {
        match node.param("type") {
            Some(Value::String(s)) => s,
            _ => node.name(),
        }
    }

    fn build(&self, node: &TreeNode, path: &str) -> Result<Box<dyn Leaf>, BindError> {
        let key = Self::leaf_key(node);
        let table = match node.kind() {
            NodeKind::Condition => &self.conditions,
            _ => &self.actions,
        };
        let builder = table.get(key).ok_or_else(|| BindError::UnknownLeaf {
            path: path.to_owned(),
            kind: node.kind(),
            key: key.to_owned(),
        })?;
        builder(node).map_err(|message| BindError::Leaf { path: path.to_owned(), message })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BindError {
    #[error("no {kind} implementation registered for `{key}` at {path}")]
    UnknownLeaf { path: String, kind: NodeKind, key: String },
    #[error("cannot instantiate leaf at {path}: {message}")]
    Leaf { path: String, message: String },
}

struct Slot {
    kind: NodeKind,
    children: Vec<usize>,
    threshold: usize,
}

/// An executable tree: a validated [`TreeNode`] with every leaf bound.
pub struct Tree {
    structure: TreeNode,
    /// Nodes in preorder.
    slots: Vec<Slot>,
    leaves: Vec<Option<Box<dyn Leaf>>>,
    names: Arc<[String]>,
    /// Leaves that returned `Running` on the previous tick, in preorder.
    running: Vec<usize>,
    seen: Vec<u64>,
    ticks: u64,
}

impl fmt::Debug for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tree")
            .field("root", &self.structure.name())
            .field("nodes", &self.slots.len())
            .field("ticks", &self.ticks)
            .finish()
    }
}

impl Tree {
    pub fn new(structure: TreeNode, registry: &LeafRegistry) -> Result<Tree, BindError> {
        let n = structure.node_count();
        let mut slots = Vec::with_capacity(n);
        let mut leaves = Vec::with_capacity(n);
        let mut names = Vec::with_capacity(n);
        flatten(&structure, "", registry, &mut slots, &mut leaves, &mut names)?;
        Ok(Tree { structure, slots, leaves, names: names.into(), running: Vec::new(), seen: vec![0; n], ticks: 0 })
    }

    pub fn structure(&self) -> &TreeNode {
        &self.structure
    }

    pub fn tick_count(&self) -> u64 {
        self.ticks
    }

    /// Tick the root once against the blackboard's current clock.
    pub fn tick(&mut self, blackboard: &Blackboard) -> (NodeStatus, TickRecord) {
        let mut ctx = TickContext::new(blackboard);
        let stamp = self.ticks + 1;
        let mut walk = Walk {
            slots: &self.slots,
            leaves: &mut self.leaves,
            seen: &mut self.seen,
            names: &self.names,
            stamp,
            visits: Vec::with_capacity(self.slots.len()),
            faults: Vec::new(),
        };
        let status = walk.tick(0, &mut ctx);
        let Walk { visits, faults, .. } = walk;

        let mut halted = Vec::new();
        for &i in &self.running {
            if self.seen[i] != stamp {
                if let Some(leaf) = self.leaves[i].as_mut() {
                    leaf.halt();
                }
                halted.push(self.names[i].clone());
            }
        }
        self.running.clear();
        for &(i, s) in &visits {
            if s == NodeStatus::Running && self.leaves[i].is_some() {
                self.running.push(i);
            }
        }

        let record = TickRecord {
            tick: self.ticks,
            time: ctx.now,
            names: self.names.clone(),
            visits,
            barriers: ctx.barriers,
            nominal: ctx.nominal.or_else(|| ctx.command.clone()),
            command: ctx.command,
            faults,
            halted,
            notes: ctx.notes,
        };
        self.ticks += 1;
        (status, record)
    }
}

/// State of one tick's traversal.
struct Walk<'t> {
    slots: &'t [Slot],
    leaves: &'t mut [Option<Box<dyn Leaf>>],
    seen: &'t mut [u64],
    names: &'t [String],
    stamp: u64,
    visits: Vec<(usize, NodeStatus)>,
    faults: Vec<LeafFault>,
}

impl Walk<'_> {
    fn tick(&mut self, idx: usize, ctx: &mut TickContext<'_>) -> NodeStatus {
        self.seen[idx] = self.stamp;
        let pos = self.visits.len();
        self.visits.push((idx, NodeStatus::Failure));
        let slots = self.slots;
        let slot = &slots[idx];
        let status = match slot.kind {
            NodeKind::Condition | NodeKind::Action => {
                let leaf = self.leaves[idx].as_mut().expect("leaves are bound at construction");
                match leaf.tick(ctx) {
                    Ok(s) => s,
                    Err(e) => {
                        self.faults.push(LeafFault { node: self.names[idx].clone(), error: e.0 });
                        NodeStatus::Failure
                    }
                }
            }
            NodeKind::Sequence => {
                let mut out = NodeStatus::Success;
                for &c in &slot.children {
                    out = self.tick(c, ctx);
                    if out != NodeStatus::Success {
                        break;
                    }
                }
                out
            }
            NodeKind::Fallback => {
                let mut out = NodeStatus::Failure;
                for &c in &slot.children {
                    out = self.tick(c, ctx);
                    if out != NodeStatus::Failure {
                        break;
                    }
                }
                out
            }
            NodeKind::Parallel => {
                let (mut ok, mut failed) = (0, 0);
                for &c in &slot.children {
                    match self.tick(c, ctx) {
                        NodeStatus::Success => ok += 1,
                        NodeStatus::Failure => failed += 1,
                        NodeStatus::Running => {}
                    }
                }
                let (n, m) = (slot.children.len(), slot.threshold);
                if ok >= m {
                    NodeStatus::Success
                } else if failed > n - m {
                    NodeStatus::Failure
                } else {
                    NodeStatus::Running
                }
            }
            NodeKind::Inverter => match self.tick(slot.children[0], ctx) {
                NodeStatus::Success => NodeStatus::Failure,
                NodeStatus::Failure => NodeStatus::Success,
                NodeStatus::Running => NodeStatus::Running,
            },
        };
        self.visits[pos].1 = status;
        status
    }
}

fn flatten(
    node: &TreeNode,
    parent: &str,
    registry: &LeafRegistry,
    slots: &mut Vec<Slot>,
    leaves: &mut Vec<Option<Box<dyn Leaf>>>,
    names: &mut Vec<String>,
) -> Result<usize, BindError> {
    let path = format!("{parent}/{}", node.name());
    let idx = slots.len();
    leaves.push(if node.kind().is_leaf() { Some(registry.build(node, &path)?) } else { None });
    slots.push(Slot { kind: node.kind(), children: Vec::new(), threshold: node.threshold().unwrap_or(0) });
    names.push(node.name().to_owned());
    for c in node.children() {
        let ci = flatten(c, &path, registry, slots, leaves, names)?;
        slots[idx].children.push(ci);
    }
    Ok(idx)
}
