//! Predicate trees: the learned abstraction from concrete states to abstract states.
//!
//! A [`PredicateTree`] is a binary decision tree whose internal nodes carry a
//! [`Predicate`] over one state variable (true goes to `ch1`, false to `ch0`)
//! and whose leaves are abstract states. Trees are grown greedily by
//! information gain with respect to the next action taken from each state.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ConcreteState, TraceLog, TypeTag, Value};

/// Class label for states with no next action.
pub const FINAL_LABEL: &str = "⊥";

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("log contains no transitions")]
    EmptyLog,
    #[error("unknown leaf {0}")]
    UnknownLeaf(StateId),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Stable identifier of an abstract state (a leaf). Never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Index of a node inside one tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    /// `var > threshold` for numeric variables.
    ScalarThreshold { var: String, threshold: f64 },
    BooleanEq { var: String, expected: bool },
    TextEq { var: String, expected: String },
    /// The collection is empty.
    StructEmpty { var: String },
    /// `|var| > threshold`.
    StructCardThreshold { var: String, threshold: u64 },
}

impl Predicate {
    pub fn var(&self) -> &str {
        match self {
            Predicate::ScalarThreshold { var, .. }
            | Predicate::BooleanEq { var, .. }
            | Predicate::TextEq { var, .. }
            | Predicate::StructEmpty { var }
            | Predicate::StructCardThreshold { var, .. } => var,
        }
    }

    fn kind_rank(&self) -> u8 {
        match self {
            Predicate::ScalarThreshold { .. } => 0,
            Predicate::BooleanEq { .. } => 1,
            Predicate::TextEq { .. } => 2,
            Predicate::StructEmpty { .. } => 3,
            Predicate::StructCardThreshold { .. } => 4,
        }
    }

    /// Deterministic order: variable name, predicate kind, threshold.
    pub fn order(&self, other: &Predicate) -> Ordering {
        self.var()
            .cmp(other.var())
            .then(self.kind_rank().cmp(&other.kind_rank()))
            .then_with(|| match (self, other) {
                (
                    Predicate::ScalarThreshold { threshold: a, .. },
                    Predicate::ScalarThreshold { threshold: b, .. },
                ) => a.total_cmp(b),
                (
                    Predicate::BooleanEq { expected: a, .. },
                    Predicate::BooleanEq { expected: b, .. },
                ) => b.cmp(a),
                (Predicate::TextEq { expected: a, .. }, Predicate::TextEq { expected: b, .. }) => {
                    a.cmp(b)
                }
                (
                    Predicate::StructCardThreshold { threshold: a, .. },
                    Predicate::StructCardThreshold { threshold: b, .. },
                ) => a.cmp(b),
                _ => Ordering::Equal,
            })
    }

    pub fn accepts(&self, tag: TypeTag) -> bool {
        matches!(
            (self, tag),
            (
                Predicate::ScalarThreshold { .. },
                TypeTag::Number | TypeTag::Integer
            ) | (Predicate::BooleanEq { .. }, TypeTag::Boolean)
                | (Predicate::TextEq { .. }, TypeTag::Text)
                | (
                    Predicate::StructEmpty { .. } | Predicate::StructCardThreshold { .. },
                    TypeTag::Collection
                )
        )
    }

    pub fn eval(&self, s: &ConcreteState) -> Result<bool, TreeError> {
        let value = s.get(self.var()).ok_or_else(|| {
            TreeError::SchemaViolation(format!("variable `{}` missing from state", self.var()))
        })?;
        self.eval_value(value)
    }

    pub fn eval_value(&self, value: &Value) -> Result<bool, TreeError> {
        let mismatch = || {
            TreeError::SchemaViolation(format!(
                "predicate on `{}` cannot evaluate a {} value",
                self.var(),
                value.tag()
            ))
        };
        Ok(match self {
            Predicate::ScalarThreshold { threshold, .. } => {
                value.as_f64().ok_or_else(mismatch)? > *threshold
            }
            Predicate::BooleanEq { expected, .. } => value.as_bool().ok_or_else(mismatch)? == *expected,
            Predicate::TextEq { expected, .. } => value.as_text().ok_or_else(mismatch)? == expected,
            Predicate::StructEmpty { .. } => value.cardinality().ok_or_else(mismatch)? == 0,
            Predicate::StructCardThreshold { threshold, .. } => {
                value.cardinality().ok_or_else(mismatch)? as u64 > *threshold
            }
        })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::ScalarThreshold { var, threshold } => write!(f, "{var} > {threshold}"),
            Predicate::BooleanEq { var, expected } => write!(f, "{var} = {expected}"),
            Predicate::TextEq { var, expected } => write!(f, "{var} = {expected:?}"),
            Predicate::StructEmpty { var } => write!(f, "empty({var})"),
            Predicate::StructCardThreshold { var, threshold } => write!(f, "|{var}| > {threshold}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal {
        predicate: Predicate,
        ch0: NodeId,
        ch1: NodeId,
    },
    Leaf {
        state: StateId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateTree {
    nodes: Vec<Node>,
    root: NodeId,
    next_state: u64,
    revision: u64,
}

impl Default for PredicateTree {
    fn default() -> Self {
        Self::single_leaf()
    }
}

impl PredicateTree {
    pub fn single_leaf() -> Self {
        PredicateTree {
            nodes: vec![Node::Leaf { state: StateId(0) }],
            root: NodeId(0),
            next_state: 1,
            revision: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of splits applied since the tree was created.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.node(id), Some(Node::Leaf { .. }))
    }

    /// Leaves as `(node, abstract state)` in node order.
    pub fn leaves(&self) -> Vec<(NodeId, StateId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                Node::Leaf { state } => Some((NodeId(i), *state)),
                _ => None,
            })
            .collect()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn leaf_states(&self) -> BTreeSet<StateId> {
        self.leaves().into_iter().map(|(_, s)| s).collect()
    }

    pub fn leaf_node(&self, state: StateId) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(n, Node::Leaf { state: s } if *s == state)).map(NodeId)
    }

    /// The leaf node reached by `s`.
    pub fn route(&self, s: &ConcreteState) -> Result<NodeId, TreeError> {
        let mut cur = self.root;
        loop {
            match &self.nodes[cur.0] {
                Node::Leaf { .. } => return Ok(cur),
                Node::Internal { predicate, ch0, ch1 } => {
                    cur = if predicate.eval(s)? { *ch1 } else { *ch0 };
                }
            }
        }
    }

    /// The abstraction function: abstract state of a concrete state.
    pub fn abstract_state(&self, s: &ConcreteState) -> Result<StateId, TreeError> {
        match &self.nodes[self.route(s)?.0] {
            Node::Leaf { state } => Ok(*state),
            Node::Internal { .. } => unreachable!("route ends at a leaf"),
        }
    }

    /// Predicates on the path from the root to `node`, with the branch taken.
    pub fn path_to(&self, node: NodeId) -> Option<Vec<(Predicate, bool)>> {
        fn walk(
            t: &PredicateTree,
            cur: NodeId,
            target: NodeId,
            acc: &mut Vec<(Predicate, bool)>,
        ) -> bool {
            if cur == target {
                return true;
            }
            if let Node::Internal { predicate, ch0, ch1 } = &t.nodes[cur.0] {
                for (child, branch) in [(*ch0, false), (*ch1, true)] {
                    acc.push((predicate.clone(), branch));
                    if walk(t, child, target, acc) {
                        return true;
                    }
                    acc.pop();
                }
            }
            false
        }
        let mut acc = Vec::new();
        walk(self, self.root, node, &mut acc).then_some(acc)
    }

    pub fn depth(&self, node: NodeId) -> Option<usize> {
        self.path_to(node).map(|p| p.len())
    }

    /// Replaces the leaf of `state` by an internal node; returns `(false child, true child)`.
    fn split_in_place(
        &mut self,
        state: StateId,
        predicate: Predicate,
    ) -> Result<(StateId, StateId), TreeError> {
        let node = self.leaf_node(state).ok_or(TreeError::UnknownLeaf(state))?;
        let s0 = StateId(self.next_state);
        let s1 = StateId(self.next_state + 1);
        self.next_state += 2;
        let ch0 = NodeId(self.nodes.len());
        let ch1 = NodeId(self.nodes.len() + 1);
        self.nodes.push(Node::Leaf { state: s0 });
        self.nodes.push(Node::Leaf { state: s1 });
        self.nodes[node.0] = Node::Internal { predicate, ch0, ch1 };
        self.revision += 1;
        Ok((s0, s1))
    }

    /// Returns a copy with the leaf of `state` split on `predicate`.
    pub fn with_split(
        &self,
        state: StateId,
        predicate: Predicate,
    ) -> Result<(PredicateTree, (StateId, StateId)), TreeError> {
        let mut t = self.clone();
        let children = t.split_in_place(state, predicate)?;
        Ok((t, children))
    }

    /// Checks the structural invariants: proper binary tree, acyclic, fully
    /// reachable, unique leaf ids below the id counter, and no predicate
    /// repeated along a root-to-leaf path.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::InvalidTree(m));
        if self.root.0 >= self.nodes.len() {
            return bad("root out of range".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut states = BTreeSet::new();
        let mut stack: Vec<(NodeId, Vec<Predicate>)> = vec![(self.root, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            if id.0 >= self.nodes.len() {
                return bad(format!("child {} out of range", id.0));
            }
            if std::mem::replace(&mut seen[id.0], true) {
                return bad(format!("node {} reached twice", id.0));
            }
            match &self.nodes[id.0] {
                Node::Leaf { state } => {
                    if state.0 >= self.next_state || !states.insert(*state) {
                        return bad(format!("leaf id {state} reused or out of range"));
                    }
                }
                Node::Internal { predicate, ch0, ch1 } => {
                    if path.contains(predicate) {
                        return bad(format!("predicate `{predicate}` repeated on a path"));
                    }
                    let mut p = path.clone();
                    p.push(predicate.clone());
                    stack.push((*ch1, p.clone()));
                    stack.push((*ch0, p));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!("node {i} unreachable"));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&TreeDoc::from(self)).expect("tree serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, TreeError> {
        let doc: TreeDoc = serde_json::from_str(s)?;
        let tree = PredicateTree::try_from(doc)?;
        tree.validate()?;
        Ok(tree)
    }
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    root: usize,
    next_abstract_state_id: u64,
    revision: u64,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicate: Option<Predicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ch0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ch1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    abstract_state_id: Option<u64>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum NodeKind {
    Internal,
    Leaf,
}

impl From<&PredicateTree> for TreeDoc {
    fn from(t: &PredicateTree) -> Self {
        let nodes = t
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| match n {
                Node::Internal { predicate, ch0, ch1 } => NodeDoc {
                    id,
                    kind: NodeKind::Internal,
                    predicate: Some(predicate.clone()),
                    ch0: Some(ch0.0),
                    ch1: Some(ch1.0),
                    abstract_state_id: None,
                },
                Node::Leaf { state } => NodeDoc {
                    id,
                    kind: NodeKind::Leaf,
                    predicate: None,
                    ch0: None,
                    ch1: None,
                    abstract_state_id: Some(state.0),
                },
            })
            .collect();
        TreeDoc {
            root: t.root.0,
            next_abstract_state_id: t.next_state,
            revision: t.revision,
            nodes,
        }
    }
}

impl TryFrom<TreeDoc> for PredicateTree {
    type Error = TreeError;

    fn try_from(doc: TreeDoc) -> Result<Self, TreeError> {
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for (i, n) in doc.nodes.into_iter().enumerate() {
            if n.id != i {
                return Err(TreeError::InvalidTree(format!(
                    "node ids must be dense, found {} at position {i}",
                    n.id
                )));
            }
            let node = match n.kind {
                NodeKind::Internal => match (n.predicate, n.ch0, n.ch1) {
                    (Some(predicate), Some(ch0), Some(ch1)) => Node::Internal {
                        predicate,
                        ch0: NodeId(ch0),
                        ch1: NodeId(ch1),
                    },
                    _ => {
                        return Err(TreeError::InvalidTree(format!(
                            "internal node {i} needs predicate, ch0 and ch1"
                        )))
                    }
                },
                NodeKind::Leaf => Node::Leaf {
                    state: StateId(n.abstract_state_id.ok_or_else(|| {
                        TreeError::InvalidTree(format!("leaf {i} has no abstract_state_id"))
                    })?),
                },
            };
            nodes.push(node);
        }
        Ok(PredicateTree {
            nodes,
            root: NodeId(doc.root),
            next_state: doc.next_abstract_state_id,
            revision: doc.revision,
        })
    }
}

/// Shannon entropy in bits of a class-count vector.
pub fn entropy(counts: &[usize]) -> Result<f64, TreeError> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TreeError::EmptyBatch);
    }
    let n = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Concrete states paired with the class label (next action or [`FINAL_LABEL`]).
#[derive(Debug, Clone, Default)]
pub struct LabeledBatch<'a> {
    items: Vec<(&'a ConcreteState, &'a str)>,
}

impl<'a> LabeledBatch<'a> {
    pub fn new(items: Vec<(&'a ConcreteState, &'a str)>) -> Self {
        LabeledBatch { items }
    }

    /// Every state of the log labeled by its next action.
    pub fn from_log(log: &'a TraceLog) -> Self {
        let items = log
            .traces()
            .iter()
            .flat_map(|t| {
                t.states().enumerate().map(move |(pos, s)| {
                    (s, t.next_action(pos).map_or(FINAL_LABEL, |a| a.name.as_str()))
                })
            })
            .collect();
        LabeledBatch { items }
    }

    pub fn items(&self) -> &[(&'a ConcreteState, &'a str)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<&'a str, usize> {
        let mut m = BTreeMap::new();
        for (_, l) in &self.items {
            *m.entry(*l).or_insert(0) += 1;
        }
        m
    }

    pub fn entropy(&self) -> Result<f64, TreeError> {
        entropy(&self.class_counts().into_values().collect::<Vec<_>>())
    }

    fn subset(&self, idx: &[usize]) -> LabeledBatch<'a> {
        LabeledBatch {
            items: idx.iter().map(|&i| self.items[i]).collect(),
        }
    }
}

/// Label-indexed view used for repeated gain evaluation.
struct Indexed {
    labels: Vec<usize>,
    n_labels: usize,
}

impl Indexed {
    fn new(batch: &LabeledBatch<'_>) -> Self {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let labels = batch
            .items
            .iter()
            .map(|(_, l)| {
                let next = ids.len();
                *ids.entry(*l).or_insert(next)
            })
            .collect();
        Indexed {
            labels,
            n_labels: ids.len(),
        }
    }

    /// Returns `(gain, |false side|, |true side|)`.
    fn gain(
        &self,
        batch: &LabeledBatch<'_>,
        predicate: &Predicate,
        parent_entropy: f64,
    ) -> Result<(f64, usize, usize), TreeError> {
        let mut side = [vec![0usize; self.n_labels], vec![0usize; self.n_labels]];
        for ((s, _), &l) in batch.items.iter().zip(&self.labels) {
            side[predicate.eval(s)? as usize][l] += 1;
        }
        let n0: usize = side[0].iter().sum();
        let n1: usize = side[1].iter().sum();
        if n0 == 0 || n1 == 0 {
            return Ok((0.0, n0, n1));
        }
        let n = (n0 + n1) as f64;
        let rem = n0 as f64 / n * entropy(&side[0])? + n1 as f64 / n * entropy(&side[1])?;
        Ok(((parent_entropy - rem).max(0.0), n0, n1))
    }

    fn score(side: &[Vec<usize>; 2], parent_entropy: f64) -> Result<(f64, usize, usize), TreeError> {
        let n0: usize = side[0].iter().sum();
        let n1: usize = side[1].iter().sum();
        if n0 == 0 || n1 == 0 {
            return Ok((0.0, n0, n1));
        }
        let n = (n0 + n1) as f64;
        let rem = n0 as f64 / n * entropy(&side[0])? + n1 as f64 / n * entropy(&side[1])?;
        Ok(((parent_entropy - rem).max(0.0), n0, n1))
    }

    /// Gains of predicates that all test the same variable, reading each
    /// value once. Ascending scalar thresholds are swept in one pass.
    fn gains_for_var(
        &self,
        batch: &LabeledBatch<'_>,
        preds: &[Predicate],
        parent_entropy: f64,
    ) -> Result<Vec<(f64, usize, usize)>, TreeError> {
        let Some(first) = preds.first() else {
            return Ok(Vec::new());
        };
        let var = first.var();
        let values: Vec<&Value> = batch
            .items
            .iter()
            .map(|(s, _)| {
                s.get(var)
                    .ok_or_else(|| TreeError::SchemaViolation(format!("variable `{var}` missing from state")))
            })
            .collect::<Result<_, _>>()?;
        let ascending = preds.windows(2).all(|w| match (&w[0], &w[1]) {
            (Predicate::ScalarThreshold { threshold: a, .. }, Predicate::ScalarThreshold { threshold: b, .. }) => a <= b,
            _ => false,
        });
        if matches!(first, Predicate::ScalarThreshold { .. }) && ascending {
            let mut xs: Vec<(f64, usize)> = Vec::with_capacity(values.len());
            for (v, &l) in values.iter().zip(&self.labels) {
                let x = v.as_f64().ok_or_else(|| first.eval_value(v).unwrap_err())?;
                xs.push((x, l));
            }
            xs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut side = [vec![0usize; self.n_labels], vec![0usize; self.n_labels]];
            for &(_, l) in &xs {
                side[1][l] += 1;
            }
            let mut at = 0;
            let mut out = Vec::with_capacity(preds.len());
            for p in preds {
                let Predicate::ScalarThreshold { threshold, .. } = p else { unreachable!() };
                while at < xs.len() && xs[at].0 <= *threshold {
                    side[1][xs[at].1] -= 1;
                    side[0][xs[at].1] += 1;
                    at += 1;
                }
                out.push(Self::score(&side, parent_entropy)?);
            }
            return Ok(out);
        }
        preds
            .iter()
            .map(|p| {
                let mut side = [vec![0usize; self.n_labels], vec![0usize; self.n_labels]];
                for (v, &l) in values.iter().zip(&self.labels) {
                    side[p.eval_value(v)? as usize][l] += 1;
                }
                Self::score(&side, parent_entropy)
            })
            .collect()
    }
}

/// Entropy reduction of the next-action label under a binary split.
/// Degenerate splits (one side empty) have gain 0.
pub fn information_gain(batch: &LabeledBatch<'_>, predicate: &Predicate) -> Result<f64, TreeError> {
    if batch.is_empty() {
        return Err(TreeError::EmptyBatch);
    }
    let idx = Indexed::new(batch);
    let h = batch.entropy()?;
    Ok(idx.gain(batch, predicate, h)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThresholdMode {
    /// Midpoints between consecutive sorted distinct values.
    Midpoints,
    /// At most `count` midpoints, taken at evenly spaced quantiles.
    Quantiles { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionMode {
    /// Only the identical predicate is barred below a node.
    Predicate,
    /// The split variable is barred from all descendant splits.
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    /// Minimum information gain (bits) required to split.
    pub min_gain: f64,
    pub max_depth: usize,
    pub max_leaves: usize,
    pub min_leaf_size: usize,
    pub thresholds: ThresholdMode,
    pub exclusion: ExclusionMode,
    /// Minimum frequency of a text value before it becomes a `TextEq` candidate.
    pub min_text_frequency: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            min_gain: 0.01,
            max_depth: 12,
            max_leaves: 256,
            min_leaf_size: 5,
            thresholds: ThresholdMode::Midpoints,
            exclusion: ExclusionMode::Predicate,
            min_text_frequency: 1,
        }
    }
}

/// Predicates (or variables) barred below a node.
#[derive(Debug, Clone, Default)]
pub struct Exclusion {
    pub predicates: Vec<Predicate>,
    pub variables: BTreeSet<String>,
}

impl Exclusion {
    pub fn for_path(path: &[(Predicate, bool)], mode: ExclusionMode) -> Self {
        let mut ex = Exclusion::default();
        for (p, _) in path {
            match mode {
                ExclusionMode::Predicate => ex.predicates.push(p.clone()),
                ExclusionMode::Variable => {
                    ex.variables.insert(p.var().to_string());
                }
            }
        }
        ex
    }

    pub fn excludes(&self, p: &Predicate) -> bool {
        self.variables.contains(p.var()) || self.predicates.contains(p)
    }
}

fn midpoints(sorted_distinct: &[f64], mode: ThresholdMode) -> Vec<f64> {
    let all: Vec<f64> = sorted_distinct
        .windows(2)
        .map(|w| w[0] + (w[1] - w[0]) / 2.0)
        .collect();
    match mode {
        ThresholdMode::Midpoints => all,
        ThresholdMode::Quantiles { count } if all.len() > count => {
            let m = all.len();
            let mut picked: Vec<f64> = (1..=count)
                .map(|j| all[(j * m / (count + 1)).min(m - 1)])
                .collect();
            picked.dedup();
            picked
        }
        ThresholdMode::Quantiles { .. } => all,
    }
}

/// Type-directed candidate predicates for a batch, sorted in tie-break order.
pub fn candidate_predicates(
    batch: &LabeledBatch<'_>,
    excluded: &Exclusion,
    cfg: &TreeConfig,
) -> Vec<Predicate> {
    let Some((first, _)) = batch.items.first() else {
        return Vec::new();
    };
    let mut names: Vec<(&str, TypeTag)> = first.variables().map(|(_, n, v)| (n, v.tag())).collect();
    names.sort();
    let mut out = Vec::new();
    for (var, tag) in names {
        let values = batch.items.iter().filter_map(|(s, _)| s.get(var));
        match tag {
            TypeTag::Number | TypeTag::Integer => {
                let mut xs: Vec<f64> = values.filter_map(Value::as_f64).collect();
                xs.sort_by(f64::total_cmp);
                xs.dedup();
                for threshold in midpoints(&xs, cfg.thresholds) {
                    out.push(Predicate::ScalarThreshold {
                        var: var.to_string(),
                        threshold,
                    });
                }
            }
            TypeTag::Boolean => out.push(Predicate::BooleanEq {
                var: var.to_string(),
                expected: true,
            }),
            TypeTag::Text => {
                let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
                for v in values.filter_map(Value::as_text) {
                    *freq.entry(v).or_insert(0) += 1;
                }
                for (text, n) in freq {
                    if n >= cfg.min_text_frequency.max(1) {
                        out.push(Predicate::TextEq {
                            var: var.to_string(),
                            expected: text.to_string(),
                        });
                    }
                }
            }
            TypeTag::Collection => {
                out.push(Predicate::StructEmpty {
                    var: var.to_string(),
                });
                let mut cards: Vec<u64> = values
                    .filter_map(Value::cardinality)
                    .map(|c| c as u64)
                    .collect();
                cards.sort_unstable();
                cards.dedup();
                for w in cards.windows(2) {
                    // floor of the midpoint; θ = 0 would duplicate emptiness
                    let threshold = (w[0] + w[1]) / 2;
                    if threshold > 0 {
                        out.push(Predicate::StructCardThreshold {
                            var: var.to_string(),
                            threshold,
                        });
                    }
                }
            }
        }
    }
    out.retain(|p| !excluded.excludes(p));
    out.sort_by(|a, b| a.order(b));
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum NoSplitReason {
    /// All states share one next-action label.
    Pure,
    /// Fewer than twice the minimum leaf size.
    TooSmall,
    NoCandidates,
    /// Best gain did not exceed the minimum gain.
    LowGain { best: f64 },
    /// Depth or leaf-count bound reached.
    Bounds,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub tree: PredicateTree,
    pub parent: StateId,
    /// Children as `(false branch, true branch)`.
    pub children: (StateId, StateId),
    pub predicate: Predicate,
    pub gain: f64,
    /// Revision of the tree the split was computed on.
    pub base_revision: u64,
}

#[derive(Debug, Clone)]
pub enum SplitOutcome {
    Split(Split),
    NoBeneficialSplit(NoSplitReason),
}

/// Best admissible predicate for a batch: max gain, ties broken by candidate order.
pub fn best_predicate(
    batch: &LabeledBatch<'_>,
    excluded: &Exclusion,
    cfg: &TreeConfig,
) -> Result<Result<(Predicate, f64), NoSplitReason>, TreeError> {
    if batch.is_empty() {
        return Err(TreeError::EmptyBatch);
    }
    let h = batch.entropy()?;
    if h <= 0.0 {
        return Ok(Err(NoSplitReason::Pure));
    }
    if batch.len() < 2 * cfg.min_leaf_size {
        return Ok(Err(NoSplitReason::TooSmall));
    }
    let candidates = candidate_predicates(batch, excluded, cfg);
    if candidates.is_empty() {
        return Ok(Err(NoSplitReason::NoCandidates));
    }
    let idx = Indexed::new(batch);
    let mut best: Option<(Predicate, f64)> = None;
    let mut start = 0;
    while start < candidates.len() {
        // runs of one variable and one predicate kind
        let same = |p: &Predicate| {
            p.var() == candidates[start].var()
                && std::mem::discriminant(p) == std::mem::discriminant(&candidates[start])
        };
        let end = start + candidates[start..].iter().take_while(|p| same(p)).count();
        let group = &candidates[start..end];
        for (p, (gain, n0, n1)) in group.iter().zip(idx.gains_for_var(batch, group, h)?) {
            if n0 < cfg.min_leaf_size.max(1) || n1 < cfg.min_leaf_size.max(1) {
                continue;
            }
            if best.as_ref().is_none_or(|(_, g)| gain > *g) {
                best = Some((p.clone(), gain));
            }
        }
        start = end;
    }
    Ok(match best {
        None => Err(NoSplitReason::NoCandidates),
        Some((_, g)) if g <= cfg.min_gain => Err(NoSplitReason::LowGain { best: g }),
        Some(b) => Ok(b),
    })
}

/// Splits the leaf of `leaf` on the max-gain admissible predicate for `batch`.
pub fn split_leaf(
    tree: &PredicateTree,
    leaf: StateId,
    batch: &LabeledBatch<'_>,
    excluded: &Exclusion,
    cfg: &TreeConfig,
) -> Result<SplitOutcome, TreeError> {
    let node = tree.leaf_node(leaf).ok_or(TreeError::UnknownLeaf(leaf))?;
    let depth = tree.depth(node).unwrap_or(0);
    if depth >= cfg.max_depth || tree.num_leaves() >= cfg.max_leaves {
        return Ok(SplitOutcome::NoBeneficialSplit(NoSplitReason::Bounds));
    }
    match best_predicate(batch, excluded, cfg)? {
        Err(reason) => Ok(SplitOutcome::NoBeneficialSplit(reason)),
        Ok((predicate, gain)) => {
            let (new_tree, children) = tree.with_split(leaf, predicate.clone())?;
            Ok(SplitOutcome::Split(Split {
                tree: new_tree,
                parent: leaf,
                children,
                predicate,
                gain,
                base_revision: tree.revision(),
            }))
        }
    }
}

/// Greedy top-down construction over every state of the log, labeled by next
/// action. Nodes are expanded breadth-first so the leaf bound cuts evenly.
pub fn build_initial_tree(log: &TraceLog, cfg: &TreeConfig) -> Result<PredicateTree, TreeError> {
    if log.num_transitions() == 0 {
        return Err(TreeError::EmptyLog);
    }
    let batch = LabeledBatch::from_log(log);
    let mut tree = PredicateTree::single_leaf();
    let mut queue: VecDeque<(StateId, LabeledBatch<'_>)> = VecDeque::new();
    queue.push_back((StateId(0), batch));
    while let Some((leaf, batch)) = queue.pop_front() {
        let node = tree.leaf_node(leaf).ok_or(TreeError::UnknownLeaf(leaf))?;
        let path = tree.path_to(node).unwrap_or_default();
        let excluded = Exclusion::for_path(&path, cfg.exclusion);
        let SplitOutcome::Split(split) = split_leaf(&tree, leaf, &batch, &excluded, cfg)? else {
            continue;
        };
        let mut sides: [Vec<usize>; 2] = Default::default();
        for (i, (s, _)) in batch.items.iter().enumerate() {
            sides[split.predicate.eval(s)? as usize].push(i);
        }
        queue.push_back((split.children.0, batch.subset(&sides[0])));
        queue.push_back((split.children.1, batch.subset(&sides[1])));
        tree = split.tree;
    }
    Ok(tree)
}
