//! Safety branches: `Fallback[Sequence[c1..ck], evasive]` guards prepended to a task.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use super::condition::ConditionInstance;
use crate::bt::{NodeKind, NodeName, TreeError, TreeNode};

/// Marker parameter set on the root created by [`attach`].
pub const ROLE_PARAM: &str = "role";
const ROOT_ROLE: &str = "safety-root";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BranchError {
    #[error("a safety branch needs at least one condition")]
    NoConditions,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Build `Fallback[Sequence[c1..ck], evasive]` named `name`; the sequence is
/// named `{name}_checks`.
pub fn make_safety_branch_named(
    name: &str,
    conditions: &[ConditionInstance],
    evasive: TreeNode,
) -> Result<TreeNode, BranchError> {
    if conditions.is_empty() {
        return Err(BranchError::NoConditions);
    }
    let checks = conditions.iter().map(ConditionInstance::to_node).collect::<Result<Vec<_>, _>>()?;
    let checks = TreeNode::sequence(&format!("{name}_checks"), checks)?;
    Ok(TreeNode::fallback(name, vec![checks, evasive])?)
}

pub fn make_safety_branch(conditions: &[ConditionInstance], evasive: TreeNode) -> Result<TreeNode, BranchError> {
    make_safety_branch_named("safety_branch", conditions, evasive)
}

/// Run `branch` before `task` under a new root `Sequence` named `{branch}_root`.
/// `task` is moved in unchanged.
pub fn attach(task: TreeNode, branch: TreeNode) -> Result<TreeNode, TreeError> {
    let params = BTreeMap::from([(ROLE_PARAM.to_owned(), Value::from(ROOT_ROLE))]);
    let name = format!("{}_root", branch.name());
    TreeNode::new(NodeKind::Sequence, NodeName::new(name)?, params, vec![branch, task])
}

/// Undo [`attach`], returning `(branch, task)`; `None` if `tree` was not built by it.
pub fn detach(tree: TreeNode) -> Option<(TreeNode, TreeNode)> {
    let is_root = tree.kind() == NodeKind::Sequence
        && tree.children().len() == 2
        && tree.param(ROLE_PARAM).and_then(Value::as_str) == Some(ROOT_ROLE);
    if !is_root {
        return None;
    }
    let (_, _, _, mut children) = tree.into_parts();
    let task = children.pop()?;
    let branch = children.pop()?;
    Some((branch, task))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bt::{serialize_tree, Blackboard, LeafRegistry, NodeStatus, Tree};
    use crate::safety::condition::register_barrier_conditions;
    use crate::safety::spec::{builtin_spec, BarrierLibrary};

    fn human_far() -> ConditionInstance {
        let spec = Arc::new(builtin_spec("human_distance").unwrap());
        let channels = BTreeMap::from([
            ("robot".to_owned(), "robot/pos".to_owned()),
            ("human".to_owned(), "human/pos".to_owned()),
        ]);
        ConditionInstance::new("human_far", spec, &Default::default(), &channels).unwrap()
    }

    fn battery_ok() -> ConditionInstance {
        let spec = Arc::new(builtin_spec("battery_min").unwrap());
        let channels = BTreeMap::from([("battery".to_owned(), "robot/battery".to_owned())]);
        ConditionInstance::new("battery_ok", spec, &Default::default(), &channels).unwrap()
    }

    fn registry() -> LeafRegistry {
        let mut reg = LeafRegistry::new();
        register_barrier_conditions(&mut reg, &BarrierLibrary::with_builtins());
        reg.register_action("retreat", |_| Ok(Box::new(|_: &mut crate::bt::TickContext<'_>| Ok(NodeStatus::Running))));
        reg.register_action("work", |_| Ok(Box::new(|_: &mut crate::bt::TickContext<'_>| Ok(NodeStatus::Success))));
        reg
    }

    fn board(human: [f64; 2]) -> Blackboard {
        let bb = Blackboard::new();
        bb.publish("robot/pos", 0.0, vec![0.0, 0.0]).unwrap();
        bb.publish("human/pos", 0.0, human.to_vec()).unwrap();
        bb.publish("robot/battery", 0.0, vec![0.9]).unwrap();
        bb
    }

    #[test]
    fn failing_condition_ticks_evasive() {
        let branch = make_safety_branch(&[human_far()], TreeNode::action("retreat").unwrap()).unwrap();
        let mut tree = Tree::new(branch, &registry()).unwrap();
        let (s, rec) = tree.tick(&board([0.5, 0.0]));
        assert_eq!(s, NodeStatus::Running);
        let order: Vec<_> = rec.statuses().collect();
        let far = order.iter().position(|(n, _)| *n == "human_far").unwrap();
        let retreat = order.iter().position(|(n, _)| *n == "retreat").unwrap();
        assert_eq!(order[far].1, NodeStatus::Failure);
        assert!(far < retreat);
    }

    #[test]
    fn holding_conditions_skip_evasive() {
        let branch = make_safety_branch(&[human_far(), battery_ok()], TreeNode::action("retreat").unwrap()).unwrap();
        let mut tree = Tree::new(branch, &registry()).unwrap();
        let (s, rec) = tree.tick(&board([3.0, 4.0]));
        assert_eq!(s, NodeStatus::Success);
        assert!(!rec.was_ticked("retreat"));
        assert_eq!(rec.status_of("battery_ok"), Some(NodeStatus::Success));
    }

    #[test]
    fn attach_detach_is_byte_identical() {
        let task = TreeNode::sequence("task", vec![TreeNode::action("work").unwrap()]).unwrap();
        let before = serialize_tree(&task).to_json();
        let branch = make_safety_branch(&[human_far()], TreeNode::action("retreat").unwrap()).unwrap();
        let guarded = attach(task, branch).unwrap();
        assert_eq!(serialize_tree(&guarded.children()[1]).to_json(), before);
        let (_, task) = detach(guarded).unwrap();
        assert_eq!(serialize_tree(&task).to_json(), before);
        assert!(detach(task).is_none());
    }

    #[test]
    fn rejects_empty_and_clashing_branches() {
        assert_eq!(make_safety_branch(&[], TreeNode::action("retreat").unwrap()), Err(BranchError::NoConditions));
        let branch = make_safety_branch(&[human_far()], TreeNode::action("retreat").unwrap()).unwrap();
        let task = TreeNode::action("retreat").unwrap();
        assert!(matches!(attach(task, branch), Err(TreeError::DuplicateName { .. })));
    }
}
