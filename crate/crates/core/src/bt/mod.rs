//! Behavior tree engine.

mod blackboard;
mod engine;
mod node;

pub use blackboard::{Blackboard, BlackboardError, Sample};
pub use engine::{BindError, Leaf, LeafBuilder, LeafError, LeafFault, LeafRegistry, TickContext, TickRecord, Tree};
pub use node::{
    build_tree, parse_tree, serialize_tree, NodeKind, NodeName, NodeStatus, TreeDocument, TreeError, TreeNode,
};
