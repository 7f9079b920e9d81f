//! Knowledge-concept hierarchy.
//!
//! A [`KcTree`] is loaded from a line-delimited JSON document with one
//! object per node (`{"id", "name", "parent"}`). Document order is kept and
//! drives every deterministic iteration downstream: leaf order, tie-breaks,
//! exam sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque concept identifier, unique within one tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KcId(pub String);

impl KcId {
    pub fn new(id: impl Into<String>) -> Self {
        KcId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for KcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for KcId {
    fn from(s: &str) -> Self {
        KcId(s.to_string())
    }
}

impl From<String> for KcId {
    fn from(s: String) -> Self {
        KcId(s)
    }
}

impl std::borrow::Borrow<str> for KcId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KcNode {
    pub id: KcId,
    pub name: String,
    pub parent: Option<KcId>,
    pub children: Vec<KcId>,
}

impl KcNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One line of the tree file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub name: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId { index: usize },
    DuplicateId { id: String },
    MissingParent { node: String, parent: String },
    MultipleParents { node: String },
    DuplicateChild { node: String, child: String },
    ParentMismatch { node: String },
    Cycle { node: String },
    NoRoot,
    Forest { roots: Vec<String> },
    Disconnected { node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId { index } => write!(f, "node #{index}: empty id"),
            Violation::DuplicateId { id } => write!(f, "duplicate id {id:?}"),
            Violation::MissingParent { node, parent } => {
                write!(f, "node {node:?}: missing parent reference {parent:?}")
            }
            Violation::MultipleParents { node } => write!(f, "node {node:?}: multiple parents"),
            Violation::DuplicateChild { node, child } => {
                write!(f, "node {node:?}: child {child:?} listed twice")
            }
            Violation::ParentMismatch { node } => {
                write!(f, "node {node:?}: parent and children links disagree")
            }
            Violation::Cycle { node } => write!(f, "cycle detected at node {node:?}"),
            Violation::NoRoot => write!(f, "no root node"),
            Violation::Forest { roots } => {
                write!(f, "forest, not tree: {} roots ({})", roots.len(), roots.join(", "))
            }
            Violation::Disconnected { node } => {
                write!(f, "node {node:?}: not reachable from the root")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("line {line}: malformed node record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid tree: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown concept {0:?}")]
    UnknownKc(KcId),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Immutable, validated concept hierarchy.
#[derive(Debug, Clone)]
pub struct KcTree {
    nodes: Vec<KcNode>,
    index: HashMap<KcId, usize>,
    parent_idx: Vec<Option<usize>>,
    children_idx: Vec<Vec<usize>>,
    root: usize,
    leaves: Vec<usize>,
    /// Root-first order in which every parent precedes its children.
    topo: Vec<usize>,
}

impl KcTree {
    /// Builds a tree from node records in document order.
    pub fn from_records(records: &[NodeRecord]) -> Result<Self, TreeError> {
        let violations = validate_records(records);
        if !violations.is_empty() {
            return Err(TreeError::Invalid(violations));
        }
        let mut nodes: Vec<KcNode> = records
            .iter()
            .map(|r| KcNode {
                id: KcId(r.id.clone()),
                name: r.name.clone(),
                parent: r.parent.clone().map(KcId),
                children: Vec::new(),
            })
            .collect();
        let index: HashMap<KcId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        for i in 0..nodes.len() {
            if let Some(p) = nodes[i].parent.clone() {
                let pi = index[&p];
                let child = nodes[i].id.clone();
                nodes[pi].children.push(child);
            }
        }
        Self::from_nodes(nodes)
    }

    /// Builds a tree from fully linked nodes, rejecting any invariant violation.
    pub fn from_nodes(nodes: Vec<KcNode>) -> Result<Self, TreeError> {
        let violations = validate_nodes(&nodes);
        if !violations.is_empty() {
            return Err(TreeError::Invalid(violations));
        }
        let index: HashMap<KcId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let parent_idx: Vec<Option<usize>> = nodes
            .iter()
            .map(|n| n.parent.as_ref().map(|p| index[p]))
            .collect();
        let children_idx: Vec<Vec<usize>> = nodes
            .iter()
            .map(|n| n.children.iter().map(|c| index[c]).collect())
            .collect();
        let root = parent_idx.iter().position(|p| p.is_none()).expect("validated root");
        let leaves = (0..nodes.len()).filter(|&i| children_idx[i].is_empty()).collect();
        let mut topo = Vec::with_capacity(nodes.len());
        topo.push(root);
        let mut head = 0;
        while head < topo.len() {
            let n = topo[head];
            topo.extend(children_idx[n].iter().copied());
            head += 1;
        }
        Ok(KcTree { nodes, index, parent_idx, children_idx, root, leaves, topo })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[KcNode] {
        &self.nodes
    }

    pub fn root(&self) -> &KcId {
        &self.nodes[self.root].id
    }

    pub fn node(&self, id: &str) -> Option<&KcNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.node(id).is_some_and(KcNode::is_leaf)
    }

    pub fn name(&self, id: &str) -> Option<&str> {
        self.node(id).map(|n| n.name.as_str())
    }

    /// Leaves in document order: the candidate set for selection and exams.
    pub fn leaves(&self) -> Vec<KcId> {
        self.leaves.iter().map(|&i| self.nodes[i].id.clone()).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Other children of `kc`'s parent, in tree order.
    pub fn siblings(&self, kc: &str) -> Result<Vec<KcId>, TreeError> {
        let i = self.index_of(kc)?;
        Ok(match self.parent_idx[i] {
            None => Vec::new(),
            Some(p) => self.children_idx[p]
                .iter()
                .filter(|&&c| c != i)
                .map(|&c| self.nodes[c].id.clone())
                .collect(),
        })
    }

    pub fn index_of(&self, kc: &str) -> Result<usize, TreeError> {
        self.index.get(kc).copied().ok_or_else(|| TreeError::UnknownKc(KcId::new(kc)))
    }

    pub(crate) fn parent_index(&self, i: usize) -> Option<usize> {
        self.parent_idx[i]
    }

    pub(crate) fn root_index(&self) -> usize {
        self.root
    }

    pub(crate) fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Re-checks every invariant. Always empty for a constructed tree.
    pub fn validate(&self) -> Vec<Violation> {
        validate_nodes(&self.nodes)
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id.0.clone(),
                name: n.name.clone(),
                parent: n.parent.as_ref().map(|p| p.0.clone()),
            })
            .collect()
    }

    /// Serializes to the line-delimited tree format, one node per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("node record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses a tree document. Blank lines are ignored.
pub fn load_tree(source: &str) -> Result<KcTree, TreeError> {
    let mut records = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord = serde_json::from_str(line)
            .map_err(|source| TreeError::Malformed { line: i + 1, source })?;
        records.push(rec);
    }
    KcTree::from_records(&records)
}

/// Checks the file-level records: ids, parent references, single root, cycles.
pub fn validate_records(records: &[NodeRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if r.id.is_empty() {
            out.push(Violation::EmptyId { index: i });
        } else if !seen.insert(&r.id) {
            out.push(Violation::DuplicateId { id: r.id.clone() });
        }
    }
    for r in records {
        if let Some(p) = &r.parent {
            if !seen.contains(p.as_str()) {
                out.push(Violation::MissingParent { node: r.id.clone(), parent: p.clone() });
            }
        }
    }
    // Cycle search over every declared edge, duplicates included.
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for r in records {
        if let Some(p) = &r.parent {
            adj.entry(p.as_str()).or_default().push(r.id.as_str());
        }
    }
    if let Some(node) = find_cycle(records.iter().map(|r| r.id.as_str()), &adj) {
        out.push(Violation::Cycle { node: node.to_string() });
    }
    let mut roots: Vec<String> = Vec::new();
    for r in records {
        if r.parent.is_none() && !roots.contains(&r.id) {
            roots.push(r.id.clone());
        }
    }
    match roots.len() {
        0 if !records.is_empty() => out.push(Violation::NoRoot),
        0 | 1 => {}
        _ => out.push(Violation::Forest { roots }),
    }
    if records.is_empty() {
        out.push(Violation::NoRoot);
    }
    out
}

fn find_cycle<'a>(
    ids: impl Iterator<Item = &'a str>,
    adj: &HashMap<&'a str, Vec<&'a str>>,
) -> Option<&'a str> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: HashMap<&str, u8> = HashMap::new();
    for start in ids {
        if state.get(start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        state.insert(start, 1);
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let kids = adj.get(node).map(Vec::as_slice).unwrap_or(&[]);
            if *next < kids.len() {
                let child = kids[*next];
                *next += 1;
                match state.get(child).copied().unwrap_or(0) {
                    0 => {
                        state.insert(child, 1);
                        stack.push((child, 0));
                    }
                    1 => return Some(child),
                    _ => {}
                }
            } else {
                state.insert(node, 2);
                stack.pop();
            }
        }
    }
    None
}

/// Checks a linked node list against every [`KcTree`] invariant.
pub fn validate_nodes(nodes: &[KcNode]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if n.id.0.is_empty() {
            out.push(Violation::EmptyId { index: i });
        } else if index.insert(n.id.as_str(), i).is_some() {
            out.push(Violation::DuplicateId { id: n.id.0.clone() });
        }
    }
    let mut listed_by: HashMap<&str, Vec<&str>> = HashMap::new();
    for n in nodes {
        let mut kids: HashSet<&str> = HashSet::new();
        for c in &n.children {
            if !kids.insert(c.as_str()) {
                out.push(Violation::DuplicateChild { node: n.id.0.clone(), child: c.0.clone() });
                continue;
            }
            if !index.contains_key(c.as_str()) {
                out.push(Violation::MissingParent { node: c.0.clone(), parent: n.id.0.clone() });
                continue;
            }
            listed_by.entry(c.as_str()).or_default().push(n.id.as_str());
        }
    }
    for n in nodes {
        let listers = listed_by.get(n.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if listers.len() > 1 {
            out.push(Violation::MultipleParents { node: n.id.0.clone() });
            continue;
        }
        match (&n.parent, listers.first()) {
            (Some(p), _) if !index.contains_key(p.as_str()) => {
                out.push(Violation::MissingParent { node: n.id.0.clone(), parent: p.0.clone() })
            }
            (Some(p), Some(l)) if p.as_str() == *l => {}
            (None, None) => {}
            _ => out.push(Violation::ParentMismatch { node: n.id.0.clone() }),
        }
    }
    let roots: Vec<String> = nodes
        .iter()
        .filter(|n| n.parent.is_none() && !listed_by.contains_key(n.id.as_str()))
        .map(|n| n.id.0.clone())
        .collect();
    match roots.len() {
        0 => out.push(Violation::NoRoot),
        1 => {
            // Reachability from the single root catches cycles detached from it.
            let mut reached: HashSet<&str> = HashSet::new();
            let mut stack = vec![roots[0].as_str()];
            while let Some(id) = stack.pop() {
                // A revisit implies a second parent, reported above.
                if !reached.insert(id) {
                    continue;
                }
                if let Some(&i) = index.get(id) {
                    stack.extend(nodes[i].children.iter().map(|c| c.as_str()));
                }
            }
            for n in nodes {
                if reached.contains(n.id.as_str()) {
                    continue;
                }
                if parent_chain_loops(nodes, &index, n) {
                    out.push(Violation::Cycle { node: n.id.0.clone() });
                } else {
                    out.push(Violation::Disconnected { node: n.id.0.clone() });
                }
            }
        }
        _ => out.push(Violation::Forest { roots }),
    }
    out
}

fn parent_chain_loops(nodes: &[KcNode], index: &HashMap<&str, usize>, start: &KcNode) -> bool {
    let mut cur = start;
    for _ in 0..=nodes.len() {
        match cur.parent.as_ref().and_then(|p| index.get(p.as_str())) {
            Some(&i) => cur = &nodes[i],
            None => return false,
        }
    }
    true
}
