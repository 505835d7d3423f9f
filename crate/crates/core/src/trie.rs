//! Prefix trie over abstracted traces.
//!
//! Edges are keyed by `(action, next abstract state)`. The root stands for the
//! empty prefix and has no abstract state; its children are keyed by the
//! abstract state of each trace's initial concrete state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::trace::{StateRef, Trace, TraceLog};
use crate::tree::{PredicateTree, StateId, TreeError};

/// Alternating sequence `s0, a0, s1, …, sn` of abstract states and actions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AbstractPath {
    states: Vec<StateId>,
    actions: Vec<String>,
}

impl AbstractPath {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn start(s0: StateId) -> Self {
        AbstractPath {
            states: vec![s0],
            actions: Vec::new(),
        }
    }

    /// Fails unless `states.len() == actions.len() + 1` (or both are empty).
    pub fn new(states: Vec<StateId>, actions: Vec<String>) -> Result<Self, String> {
        if states.is_empty() && actions.is_empty() || states.len() == actions.len() + 1 {
            Ok(AbstractPath { states, actions })
        } else {
            Err(format!(
                "{} states and {} actions do not alternate",
                states.len(),
                actions.len()
            ))
        }
    }

    /// Appends `a, s`. Panics on the empty path, which has no state to leave.
    pub fn push(&mut self, action: impl Into<String>, s: StateId) {
        assert!(!self.states.is_empty(), "push onto a path without a start state");
        self.actions.push(action.into());
        self.states.push(s);
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `(s_i, a_i, s_{i+1})` for each step.
    pub fn steps(&self) -> impl Iterator<Item = (StateId, &str, StateId)> + '_ {
        self.actions
            .iter()
            .enumerate()
            .map(|(i, a)| (self.states[i], a.as_str(), self.states[i + 1]))
    }

    /// The first `k` transitions (with their start state). Saturates at the full path.
    pub fn prefix(&self, k: usize) -> AbstractPath {
        if self.states.is_empty() {
            return AbstractPath::empty();
        }
        let k = k.min(self.len());
        AbstractPath {
            states: self.states[..=k].to_vec(),
            actions: self.actions[..k].to_vec(),
        }
    }

    /// Abstracts a trace, returning its path and the concrete reference per state.
    pub fn of_trace(
        trace: &Trace,
        trace_index: usize,
        tree: &PredicateTree,
    ) -> Result<(AbstractPath, Vec<StateRef>), TreeError> {
        let mut path = AbstractPath::empty();
        let mut refs = Vec::with_capacity(trace.num_states());
        for (pos, s) in trace.states().enumerate() {
            let id = tree.abstract_state(s)?;
            if pos == 0 {
                path.states.push(id);
            } else {
                let a = trace.next_action(pos - 1).expect("state after a step");
                path.push(a.name.clone(), id);
            }
            refs.push(StateRef {
                trace: trace_index,
                pos,
            });
        }
        Ok((path, refs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrieNodeId(pub usize);

/// Child key: the action taken (absent below the root) and the next abstract state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub action: Option<String>,
    pub target: StateId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrieNode {
    pub id: TrieNodeId,
    /// `None` only for the root.
    pub abstract_state: Option<StateId>,
    pub children: BTreeMap<EdgeKey, TrieNodeId>,
    pub record_refs: BTreeSet<StateRef>,
    pub end_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTrie {
    nodes: Vec<TrieNode>,
    by_state: BTreeMap<StateId, BTreeSet<TrieNodeId>>,
}

impl Default for TraceTrie {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceTrie {
    pub fn new() -> Self {
        TraceTrie {
            nodes: vec![TrieNode {
                id: TrieNodeId(0),
                abstract_state: None,
                children: BTreeMap::new(),
                record_refs: BTreeSet::new(),
                end_count: 0,
            }],
            by_state: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> TrieNodeId {
        TrieNodeId(0)
    }

    pub fn node(&self, id: TrieNodeId) -> Option<&TrieNode> {
        self.nodes.get(id.0)
    }

    pub fn nodes(&self) -> &[TrieNode] {
        &self.nodes
    }

    /// Node count including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    fn child(&self, at: TrieNodeId, action: Option<&str>, target: StateId) -> Option<TrieNodeId> {
        let key = EdgeKey {
            action: action.map(str::to_string),
            target,
        };
        self.nodes[at.0].children.get(&key).copied()
    }

    /// Inserts every prefix of `path`. `refs[i]` is attached to the node of
    /// state `i`; missing refs are allowed. Re-inserting an identical
    /// `(path, refs)` pair leaves the trie unchanged.
    pub fn insert(&mut self, path: &AbstractPath, refs: &[StateRef]) {
        let mut cur = self.root();
        let mut last_new = refs.is_empty() || path.is_empty();
        for (i, &s) in path.states.iter().enumerate() {
            let action = (i > 0).then(|| path.actions[i - 1].clone());
            let key = EdgeKey { action, target: s };
            cur = match self.nodes[cur.0].children.get(&key) {
                Some(&c) => c,
                None => {
                    let id = TrieNodeId(self.nodes.len());
                    self.nodes.push(TrieNode {
                        id,
                        abstract_state: Some(s),
                        children: BTreeMap::new(),
                        record_refs: BTreeSet::new(),
                        end_count: 0,
                    });
                    self.nodes[cur.0].children.insert(key, id);
                    self.by_state.entry(s).or_default().insert(id);
                    id
                }
            };
            if let Some(r) = refs.get(i) {
                let added = self.nodes[cur.0].record_refs.insert(*r);
                if i + 1 == path.states.len() {
                    last_new = added;
                }
            }
        }
        if last_new {
            self.nodes[cur.0].end_count += 1;
        }
    }

    /// Nodes of the longest supported prefix of `path`, one per state.
    pub fn walk(&self, path: &AbstractPath) -> Vec<TrieNodeId> {
        let mut out = Vec::with_capacity(path.states.len());
        let mut cur = self.root();
        for (i, &s) in path.states.iter().enumerate() {
            let action = (i > 0).then(|| path.actions[i - 1].as_str());
            match self.child(cur, action, s) {
                Some(c) => {
                    out.push(c);
                    cur = c;
                }
                None => break,
            }
        }
        out
    }

    /// Node reached by the whole path, if supported. The empty path maps to the root.
    pub fn node_at(&self, path: &AbstractPath) -> Option<TrieNodeId> {
        if path.is_empty() {
            return Some(self.root());
        }
        let w = self.walk(path);
        (w.len() == path.states.len()).then(|| *w.last().expect("non-empty walk"))
    }

    /// True iff `path` is a prefix of some inserted path.
    pub fn supports(&self, path: &AbstractPath) -> bool {
        self.earliest_divergence(path).is_none()
    }

    /// Index `k` of the first unsupported transition `s_k -a_k-> s_{k+1}`;
    /// `Some(0)` also when `s_0` itself was never an initial state.
    pub fn earliest_divergence(&self, path: &AbstractPath) -> Option<usize> {
        let matched = self.walk(path).len();
        if matched == path.states.len() {
            None
        } else {
            Some(matched.saturating_sub(1))
        }
    }

    /// Nodes whose abstract state is `leaf` (the root is never an endpoint).
    pub fn endpoints_for(&self, leaf: StateId) -> BTreeSet<TrieNodeId> {
        self.by_state.get(&leaf).cloned().unwrap_or_default()
    }

    /// Abstract states that occur on at least one node.
    pub fn used_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.by_state.keys().copied()
    }

    /// Inserts every trace of `log`, abstracted under `tree`, in log order.
    pub fn rebuild(log: &TraceLog, tree: &PredicateTree) -> Result<Self, TreeError> {
        let mut trie = TraceTrie::new();
        for (i, t) in log.traces().iter().enumerate() {
            let (path, refs) = AbstractPath::of_trace(t, i, tree)?;
            trie.insert(&path, &refs);
        }
        Ok(trie)
    }

    /// Indented text rendering for inspection.
    pub fn dump(&self) -> String {
        fn go(t: &TraceTrie, id: TrieNodeId, depth: usize, key: Option<&EdgeKey>, out: &mut String) {
            let n = &t.nodes[id.0];
            let label = match (key, n.abstract_state) {
                (None, _) => "root".to_string(),
                (Some(EdgeKey { action: None, .. }), Some(s)) => format!("{s}"),
                (Some(EdgeKey { action: Some(a), .. }), Some(s)) => format!("-{a}-> {s}"),
                (Some(_), None) => "?".to_string(),
            };
            let _ = writeln!(
                out,
                "{:indent$}{label} [node {} refs {} end {}]",
                "",
                id.0,
                n.record_refs.len(),
                n.end_count,
                indent = depth * 2
            );
            for (k, c) in &n.children {
                go(t, *c, depth + 1, Some(k), out);
            }
        }
        let mut out = String::new();
        go(self, self.root(), 0, None, &mut out);
        out
    }
}
