//! Tree structure, its document form and structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Result of ticking a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeStatus {
    Success,
    Failure,
    Running,
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeStatus::Success => "Success",
            NodeStatus::Failure => "Failure",
            NodeStatus::Running => "Running",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Sequence,
    Fallback,
    Parallel,
    Inverter,
    Condition,
    Action,
}

impl NodeKind {
    pub const ALL: [NodeKind; 6] = [
        NodeKind::Sequence,
        NodeKind::Fallback,
        NodeKind::Parallel,
        NodeKind::Inverter,
        NodeKind::Condition,
        NodeKind::Action,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Sequence => "Sequence",
            NodeKind::Fallback => "Fallback",
            NodeKind::Parallel => "Parallel",
            NodeKind::Inverter => "Inverter",
            NodeKind::Condition => "Condition",
            NodeKind::Action => "Action",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        NodeKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_leaf(self) -> bool {
        matches!(self, NodeKind::Condition | NodeKind::Action)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A non-empty node identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeName(String);

impl NodeName {
    pub fn new(name: impl Into<String>) -> Result<Self, TreeError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(TreeError::EmptyName { path: String::new() });
        }
        Ok(NodeName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Errors raised while building or validating a tree. Every variant carries
/// the path of the offending node, e.g. `/root/safety/human_far`.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unknown node kind `{kind}` at {path}")]
    UnknownKind { path: String, kind: String },
    #[error("arity violation at {path}: {kind} requires {expected} children, found {found}")]
    Arity { path: String, kind: NodeKind, expected: &'static str, found: usize },
    #[error("parameter error at {path}: {message}")]
    Param { path: String, message: String },
    #[error("duplicate node name `{name}` at {path}")]
    DuplicateName { path: String, name: String },
    #[error("empty node name at {path}")]
    EmptyName { path: String },
}

impl TreeError {
    fn at(self, prefix: &str) -> TreeError {
        let join = |p: String| format!("{prefix}{p}");
        match self {
            TreeError::Schema { path, message } => TreeError::Schema { path: join(path), message },
            TreeError::UnknownKind { path, kind } => TreeError::UnknownKind { path: join(path), kind },
            TreeError::Arity { path, kind, expected, found } => {
                TreeError::Arity { path: join(path), kind, expected, found }
            }
            TreeError::Param { path, message } => TreeError::Param { path: join(path), message },
            TreeError::DuplicateName { path, name } => TreeError::DuplicateName { path: join(path), name },
            TreeError::EmptyName { path } => TreeError::EmptyName { path: join(path) },
        }
    }
}

/// Serialized form of a tree node. Field order is canonical:
/// `kind`, `name`, `params`, `children`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDocument {
    pub kind: String,
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub children: Vec<TreeDocument>,
}

impl TreeDocument {
    pub fn from_json(text: &str) -> Result<TreeDocument, TreeError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            TreeError::Schema { path: if path == "." { "/".into() } else { path }, message: e.into_inner().to_string() }
        })
    }

    /// Canonical text: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("tree documents always serialize");
        s.push('\n');
        s
    }
}

/// A validated behavior tree node.
///
/// Values of this type always satisfy the structural invariants: control
/// nodes have the right number of children, `Parallel` carries an integer
/// threshold `M` with `1 <= M <= children`, leaves have no children and
/// node names are unique across the whole subtree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    kind: NodeKind,
    name: NodeName,
    params: BTreeMap<String, Value>,
    children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn new(
        kind: NodeKind,
        name: NodeName,
        params: BTreeMap<String, Value>,
        children: Vec<TreeNode>,
    ) -> Result<TreeNode, TreeError> {
        let path = format!("/{name}");
        check_arity(kind, children.len(), &path)?;
        if kind == NodeKind::Parallel {
            parallel_threshold(&params, children.len())
                .map_err(|message| TreeError::Param { path: path.clone(), message })?;
        }
        let mut seen = BTreeSet::new();
        seen.insert(name.as_str().to_owned());
        for child in &children {
            let mut dup = None;
            child.visit(&mut |n| {
                if dup.is_none() && !seen.insert(n.name.as_str().to_owned()) {
                    dup = Some(n.name.as_str().to_owned());
                }
            });
            if let Some(d) = dup {
                return Err(TreeError::DuplicateName { path, name: d });
            }
        }
        Ok(TreeNode { kind, name, params, children })
    }

    pub fn leaf(kind: NodeKind, name: &str, params: BTreeMap<String, Value>) -> Result<TreeNode, TreeError> {
        TreeNode::new(kind, NodeName::new(name)?, params, Vec::new())
    }

    pub fn condition(name: &str) -> Result<TreeNode, TreeError> {
        TreeNode::leaf(NodeKind::Condition, name, BTreeMap::new())
    }

    pub fn action(name: &str) -> Result<TreeNode, TreeError> {
        TreeNode::leaf(NodeKind::Action, name, BTreeMap::new())
    }

    pub fn sequence(name: &str, children: Vec<TreeNode>) -> Result<TreeNode, TreeError> {
        TreeNode::new(NodeKind::Sequence, NodeName::new(name)?, BTreeMap::new(), children)
    }

    pub fn fallback(name: &str, children: Vec<TreeNode>) -> Result<TreeNode, TreeError> {
        TreeNode::new(NodeKind::Fallback, NodeName::new(name)?, BTreeMap::new(), children)
    }

    pub fn parallel(name: &str, threshold: usize, children: Vec<TreeNode>) -> Result<TreeNode, TreeError> {
        let mut params = BTreeMap::new();
        params.insert("M".to_owned(), Value::from(threshold as u64));
        TreeNode::new(NodeKind::Parallel, NodeName::new(name)?, params, children)
    }

    pub fn inverter(name: &str, child: TreeNode) -> Result<TreeNode, TreeError> {
        TreeNode::new(NodeKind::Inverter, NodeName::new(name)?, BTreeMap::new(), vec![child])
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        self.name.as_str()
    }

    pub fn params(&self) -> &BTreeMap<String, Value> {
        &self.params
    }

    pub fn param(&self, key: &str) -> Option<&Value> {
        self.params.get(key)
    }

    pub fn children(&self) -> &[TreeNode] {
        &self.children
    }

    /// Success threshold of a `Parallel` node.
    pub fn threshold(&self) -> Option<usize> {
        (self.kind == NodeKind::Parallel).then(|| parallel_threshold(&self.params, self.children.len()).ok()).flatten()
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a TreeNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }

    pub fn find(&self, name: &str) -> Option<&TreeNode> {
        let mut found = None;
        self.visit(&mut |n| {
            if found.is_none() && n.name() == name {
                found = Some(n);
            }
        });
        found
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TreeNode::node_count).sum::<usize>()
    }

    pub fn into_parts(self) -> (NodeKind, NodeName, BTreeMap<String, Value>, Vec<TreeNode>) {
        (self.kind, self.name, self.params, self.children)
    }
}

fn check_arity(kind: NodeKind, found: usize, path: &str) -> Result<(), TreeError> {
    let (ok, expected) = match kind {
        NodeKind::Sequence | NodeKind::Fallback | NodeKind::Parallel => (found >= 1, "at least 1"),
        NodeKind::Inverter => (found == 1, "exactly 1"),
        NodeKind::Condition | NodeKind::Action => (found == 0, "exactly 0"),
    };
    if ok {
        Ok(())
    } else {
        Err(TreeError::Arity { path: path.to_owned(), kind, expected, found })
    }
}

fn parallel_threshold(params: &BTreeMap<String, Value>, n: usize) -> Result<usize, String> {
    let m = params.get("M").ok_or_else(|| "Parallel requires integer parameter `M`".to_owned())?;
    let m = m.as_u64().ok_or_else(|| format!("Parallel parameter `M` must be a positive integer, got {m}"))?;
    if m < 1 || m as usize > n {
        return Err(format!("Parallel parameter `M`={m} must satisfy 1 <= M <= {n}"));
    }
    Ok(m as usize)
}

/// Validate a document and turn it into a [`TreeNode`].
///
/// Leaves are not bound to implementations here; see
/// [`Tree::new`](super::Tree::new).
pub fn build_tree(doc: &TreeDocument) -> Result<TreeNode, TreeError> {
    let mut names = BTreeSet::new();
    build_node(doc, "", &mut names)
}

fn build_node(doc: &TreeDocument, parent: &str, names: &mut BTreeSet<String>) -> Result<TreeNode, TreeError> {
    let path = format!("{parent}/{}", doc.name);
    let kind = NodeKind::parse(&doc.kind)
        .ok_or_else(|| TreeError::UnknownKind { path: path.clone(), kind: doc.kind.clone() })?;
    let name = NodeName::new(doc.name.clone()).map_err(|e| e.at(&path))?;
    if !names.insert(doc.name.clone()) {
        return Err(TreeError::DuplicateName { path, name: doc.name.clone() });
    }
    check_arity(kind, doc.children.len(), &path)?;
    if kind == NodeKind::Parallel {
        parallel_threshold(&doc.params, doc.children.len())
            .map_err(|message| TreeError::Param { path: path.clone(), message })?;
    }
    let children = doc.children.iter().map(|c| build_node(c, &path, names)).collect::<Result<Vec<_>, _>>()?;
    // Subtree checks in `TreeNode::new` would repeat the global name check.
    Ok(TreeNode { kind, name, params: doc.params.clone(), children })
}

pub fn serialize_tree(tree: &TreeNode) -> TreeDocument {
    TreeDocument {
        kind: tree.kind.as_str().to_owned(),
        name: tree.name.as_str().to_owned(),
        params: tree.params.clone(),
        children: tree.children.iter().map(serialize_tree).collect(),
    }
}

pub fn parse_tree(text: &str) -> Result<TreeNode, TreeError> {
    build_tree(&TreeDocument::from_json(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc(v: serde_json::Value) -> TreeDocument {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn minimal_safety_pattern_builds() {
        let d = doc(json!({
            "kind": "Fallback", "name": "guard", "params": {},
            "children": [
                {"kind": "Condition", "name": "human_far", "params": {}, "children": []},
                {"kind": "Action", "name": "retreat", "params": {}, "children": []}
            ]
        }));
        let t = build_tree(&d).unwrap();
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.kind(), NodeKind::Fallback);
        assert_eq!(t.children()[0].name(), "human_far");
    }

    #[test]
    fn empty_sequence_is_an_arity_error() {
        let d = doc(json!({"kind": "Sequence", "name": "root", "children": [
            {"kind": "Sequence", "name": "empty"}
        ]}));
        match build_tree(&d) {
            Err(TreeError::Arity { path, found: 0, .. }) => assert_eq!(path, "/root/empty"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parallel_threshold_above_child_count() {
        let d = doc(json!({"kind": "Parallel", "name": "par", "params": {"M": 4}, "children": [
            {"kind": "Action", "name": "a"}, {"kind": "Action", "name": "b"}, {"kind": "Action", "name": "c"}
        ]}));
        assert!(matches!(build_tree(&d), Err(TreeError::Param { .. })));
        let d = doc(json!({"kind": "Parallel", "name": "par", "params": {"M": 1.5}, "children": [
            {"kind": "Action", "name": "a"}, {"kind": "Action", "name": "b"}
        ]}));
        assert!(matches!(build_tree(&d), Err(TreeError::Param { .. })));
    }

    #[test]
    fn inverter_needs_exactly_one_child() {
        let d = doc(json!({"kind": "Inverter", "name": "not", "children": [
            {"kind": "Action", "name": "a"}, {"kind": "Action", "name": "b"}
        ]}));
        assert!(matches!(build_tree(&d), Err(TreeError::Arity { found: 2, .. })));
        let d = doc(json!({"kind": "Action", "name": "leafy", "children": [
            {"kind": "Action", "name": "a"}
        ]}));
        assert!(matches!(build_tree(&d), Err(TreeError::Arity { found: 1, .. })));
    }

    #[test]
    fn unknown_kind_and_duplicate_names() {
        let d = doc(json!({"kind": "Sequence", "name": "root", "children": [
            {"kind": "Retry", "name": "r", "children": []}
        ]}));
        assert_eq!(build_tree(&d), Err(TreeError::UnknownKind { path: "/root/r".into(), kind: "Retry".into() }));
        let d = doc(json!({"kind": "Sequence", "name": "root", "children": [
            {"kind": "Action", "name": "a"}, {"kind": "Action", "name": "a"}
        ]}));
        assert!(matches!(build_tree(&d), Err(TreeError::DuplicateName { .. })));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err =
            TreeDocument::from_json(r#"{"kind": "Sequence", "name": "r", "children": [{"name": "x"}]}"#).unwrap_err();
        match err {
            TreeError::Schema { path, message } => {
                assert_eq!(path, "children[0]");
                assert!(message.contains("kind"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            TreeDocument::from_json(r#"{"kind": "Action", "name": "a", "extra": 1}"#),
            Err(TreeError::Schema { .. })
        ));
    }

    #[test]
    fn empty_name_is_not_representable() {
        assert!(NodeName::new("").is_err());
        assert!(TreeNode::action("  ").is_err());
        let d = doc(json!({"kind": "Action", "name": ""}));
        assert!(matches!(build_tree(&d), Err(TreeError::EmptyName { .. })));
    }

    #[test]
    fn constructors_enforce_unique_names() {
        let a = TreeNode::action("a").unwrap();
        let b = TreeNode::sequence("s", vec![TreeNode::action("a").unwrap()]).unwrap();
        assert!(matches!(TreeNode::fallback("root", vec![a, b]), Err(TreeError::DuplicateName { .. })));
    }

    #[test]
    fn round_trip_preserves_parallel_threshold() {
        let inner =
            TreeNode::parallel("inner", 1, vec![TreeNode::action("a").unwrap(), TreeNode::condition("c").unwrap()])
                .unwrap();
        let t = TreeNode::sequence("root", vec![inner, TreeNode::action("b").unwrap()]).unwrap();
        let text = serialize_tree(&t).to_json();
        let back = parse_tree(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.find("inner").unwrap().threshold(), Some(1));
        assert_eq!(serialize_tree(&back).to_json(), text);
    }

    #[test]
    fn canonical_field_order() {
        let t = TreeNode::fallback("guard", vec![TreeNode::action("retreat").unwrap()]).unwrap();
        let text = serialize_tree(&t).to_json();
        let k = text.find("\"kind\"").unwrap();
        let n = text.find("\"name\"").unwrap();
        let p = text.find("\"params\"").unwrap();
        let c = text.find("\"children\"").unwrap();
        assert!(k < n && n < p && p < c);
    }
}
