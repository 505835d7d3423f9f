//! The linked abstraction store: tree leaves, MDP vertices and trie endpoints
//! tied together by handles, with the consistency checks that keep them aligned.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::amdp::{collect_evidence, Amdp, AmdpError, EvidenceItem, LabelReport, LabelRule};
use crate::trace::{TraceError, TraceLog};
use crate::tree::{LabeledBatch, PredicateTree, Split, StateId, TreeError, FINAL_LABEL};
use crate::trie::{TraceTrie, TrieNodeId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("split was computed on tree revision {base}, store is at {current}")]
    StaleSplit { base: u64, current: u64 },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Amdp(#[from] AmdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("store manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HandleId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Handle {
    pub id: HandleId,
    /// Leaf in the predicate tree.
    pub tree: StateId,
    /// Vertex in the MDP.
    pub graph: StateId,
    pub endpoints: BTreeSet<TrieNodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Invariant {
    I1,
    I2,
    I3,
    I4,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LinkedStore {
    log: Arc<TraceLog>,
    tree: PredicateTree,
    amdp: Amdp,
    trie: TraceTrie,
    rules: Vec<LabelRule>,
    label_report: LabelReport,
    handles: BTreeMap<HandleId, Handle>,
    map_tree: BTreeMap<StateId, HandleId>,
    map_graph: BTreeMap<StateId, HandleId>,
    map_trie: BTreeMap<TrieNodeId, HandleId>,
    next_handle: u64,
}

impl LinkedStore {
    /// Abstracts the log under `tree`, builds the trie and the labeled MDP,
    /// and links one handle per leaf.
    pub fn build(log: Arc<TraceLog>, tree: PredicateTree, rules: Vec<LabelRule>) -> Result<Self, StoreError> {
        let mut store = LinkedStore {
            log,
            tree,
            amdp: Amdp::new(),
            trie: TraceTrie::new(),
            rules,
            label_report: LabelReport::default(),
            handles: BTreeMap::new(),
            map_tree: BTreeMap::new(),
            map_graph: BTreeMap::new(),
            map_trie: BTreeMap::new(),
            next_handle: 0,
        };
        store.rebuild_structures()?;
        for leaf in store.tree.leaf_states() {
            store.mint(leaf);
        }
        store.relink();
        Ok(store)
    }

    fn rebuild_structures(&mut self) -> Result<(), StoreError> {
        self.trie = TraceTrie::rebuild(&self.log, &self.tree)?;
        let mut amdp = Amdp::induce(&self.log, &self.tree)?;
        let evidence = collect_evidence(&self.log, &self.tree)?;
        self.label_report = amdp.label_states(&self.rules, &evidence, self.log.schema())?;
        self.amdp = amdp;
        Ok(())
    }

    fn mint(&mut self, leaf: StateId) -> HandleId {
        let id = HandleId(self.next_handle);
        self.next_handle += 1;
        self.handles.insert(
            id,
            Handle {
                id,
                tree: leaf,
                graph: leaf,
                endpoints: BTreeSet::new(),
            },
        );
        self.map_tree.insert(leaf, id);
        self.map_graph.insert(leaf, id);
        id
    }

    /// Recomputes endpoints and the trie map from the current trie.
    fn relink(&mut self) {
        self.map_trie.clear();
        for h in self.handles.values_mut() {
            h.endpoints = self.trie.endpoints_for(h.tree);
            for &e in &h.endpoints {
                self.map_trie.insert(e, h.id);
            }
        }
    }

    pub fn log(&self) -> &Arc<TraceLog> {
        &self.log
    }

    pub fn tree(&self) -> &PredicateTree {
        &self.tree
    }

    pub fn amdp(&self) -> &Amdp {
        &self.amdp
    }

    pub fn trie(&self) -> &TraceTrie {
        &self.trie
    }

    pub fn rules(&self) -> &[LabelRule] {
        &self.rules
    }

    pub fn label_report(&self) -> &LabelReport {
        &self.label_report
    }

    pub fn handles(&self) -> impl Iterator<Item = &Handle> {
        self.handles.values()
    }

    pub fn handle_for_leaf(&self, leaf: StateId) -> Option<&Handle> {
        self.map_tree.get(&leaf).and_then(|h| self.handles.get(h))
    }

    pub fn handle_for_vertex(&self, v: StateId) -> Option<&Handle> {
        self.map_graph.get(&v).and_then(|h| self.handles.get(h))
    }

    pub fn handle_for_trie_node(&self, n: TrieNodeId) -> Option<&Handle> {
        self.map_trie.get(&n).and_then(|h| self.handles.get(h))
    }

    /// Concrete states abstracted to `leaf`, labeled by next action.
    pub fn batch_for_leaf(&self, leaf: StateId) -> LabeledBatch<'_> {
        let mut items = Vec::new();
        if let Some(h) = self.handle_for_leaf(leaf) {
            for &e in &h.endpoints {
                for &r in &self.trie.node(e).expect("endpoint exists").record_refs {
                    if let Some(s) = self.log.state(r) {
                        let label = self.log.next_action(r).map_or(FINAL_LABEL, |a| a.name.as_str());
                        items.push((s, label));
                    }
                }
            }
        }
        LabeledBatch::new(items)
    }

    /// Concrete states abstracted to `leaf`, labeled by whether the rule
    /// named `rule` holds on each. `None` for an unknown rule name.
    pub fn rule_batch_for_leaf(&self, leaf: StateId, rule: &str) -> Result<Option<LabeledBatch<'_>>, StoreError> {
        let Some(r) = self.rules.iter().find(|r| r.name == rule) else {
            return Ok(None);
        };
        let mut items = Vec::new();
        if let Some(h) = self.handle_for_leaf(leaf) {
            for &e in &h.endpoints {
                for &ref_ in &self.trie.node(e).expect("endpoint exists").record_refs {
                    let Some(state) = self.log.state(ref_) else { continue };
                    let t = &self.log.traces()[ref_.trace];
                    let last = ref_.pos + 1 == t.num_states();
                    let item = EvidenceItem { state, terminal: last.then_some(t.terminal_status()) };
                    items.push((state, if r.holds(&item)? { "holds" } else { "fails" }));
                }
            }
        }
        Ok(Some(LabeledBatch::new(items)))
    }

    /// Replaces the split leaf with its two children. The old handle is
    /// retired and two fresh ones minted; the trie and MDP are rebuilt.
    pub fn apply_split(&mut self, split: &Split) -> Result<(), StoreError> {
        let current = self.tree.revision();
        if split.base_revision != current || !self.map_tree.contains_key(&split.parent) {
            return Err(StoreError::StaleSplit {
                base: split.base_revision,
                current,
            });
        }
        let old = self.map_tree.remove(&split.parent).expect("checked above");
        self.map_graph.remove(&split.parent);
        self.handles.remove(&old);
        self.tree = split.tree.clone();
        self.rebuild_structures()?;
        self.mint(split.children.0);
        self.mint(split.children.1);
        self.relink();
        Ok(())
    }

    /// Lists every I1-I4 violation; at most one I2 entry per trie node.
    pub fn check_invariants(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut v = |invariant, message: String| out.push(Violation { invariant, message });
        let leaves = self.tree.leaf_states();

        for h in self.handles.values() {
            if !leaves.contains(&h.tree) {
                v(Invariant::I1, format!("handle {:?}: {} is not a leaf", h.id, h.tree));
            }
            if !self.amdp.states().contains(&h.graph) {
                v(Invariant::I1, format!("handle {:?}: {} is not a vertex", h.id, h.graph));
            }
            if self.map_tree.get(&h.tree) != Some(&h.id) {
                v(Invariant::I1, format!("handle {:?}: tree map does not round-trip", h.id));
            }
            if self.map_graph.get(&h.graph) != Some(&h.id) {
                v(Invariant::I1, format!("handle {:?}: graph map does not round-trip", h.id));
            }
        }

        let mut flagged: BTreeSet<TrieNodeId> = BTreeSet::new();
        let mut i2 = |node: TrieNodeId, message: String, out: &mut Vec<Violation>| {
            if flagged.insert(node) {
                out.push(Violation {
                    invariant: Invariant::I2,
                    message,
                });
            }
        };
        for h in self.handles.values() {
            for &e in &h.endpoints {
                if self.map_trie.get(&e) != Some(&h.id) {
                    i2(e, format!("trie node {} maps away from handle {:?}", e.0, h.id), &mut out);
                    continue;
                }
                let Some(node) = self.trie.node(e) else {
                    i2(e, format!("trie node {} does not exist", e.0), &mut out);
                    continue;
                };
                if node.abstract_state != Some(h.tree) {
                    i2(e, format!("trie node {} is not labeled {}", e.0, h.tree), &mut out);
                    continue;
                }
                for &r in &node.record_refs {
                    let ok = self
                        .log
                        .state(r)
                        .map(|s| self.tree.abstract_state(s).ok() == Some(h.tree))
                        .unwrap_or(false);
                    if !ok {
                        i2(e, format!("record {r:?} at trie node {} does not abstract to {}", e.0, h.tree), &mut out);
                        break;
                    }
                }
            }
        }
        for (&e, hid) in &self.map_trie {
            let owned = self.handles.get(hid).is_some_and(|h| h.endpoints.contains(&e));
            if !owned {
                i2(e, format!("trie node {} maps to handle {hid:?} which does not list it", e.0), &mut out);
            }
        }
        for n in self.trie.nodes().iter().skip(1) {
            if !self.map_trie.contains_key(&n.id) {
                i2(n.id, format!("trie node {} has no handle", n.id.0), &mut out);
            }
        }

        let handle_leaves: BTreeSet<StateId> = self.handles.values().map(|h| h.tree).collect();
        if handle_leaves != leaves || self.map_tree.len() != self.handles.len() {
            out.push(Violation {
                invariant: Invariant::I3,
                message: "leaves and handles are not in bijection".into(),
            });
        }
        let handle_vertices: BTreeSet<StateId> = self.handles.values().map(|h| h.graph).collect();
        if handle_vertices.len() != self.handles.len() || self.map_graph.len() != self.handles.len() {
            out.push(Violation {
                invariant: Invariant::I3,
                message: "vertices and handles are not in bijection".into(),
            });
        }
        if &handle_vertices != self.amdp.states() {
            out.push(Violation {
                invariant: Invariant::I4,
                message: "MDP state set differs from handle vertices".into(),
            });
        }
        out
    }

    /// Equality of tree, trie, MDP and handle wiring, ignoring handle ids.
    pub fn same_structure(&self, other: &LinkedStore) -> bool {
        let wiring = |s: &LinkedStore| -> BTreeMap<StateId, (StateId, BTreeSet<TrieNodeId>)> {
            s.handles.values().map(|h| (h.tree, (h.graph, h.endpoints.clone()))).collect()
        };
        self.tree == other.tree
            && self.trie == other.trie
            && self.amdp == other.amdp
            && wiring(self) == wiring(other)
    }

    /// Writes `tree.json`, `model.tra`, `model.lab` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, manifest: &StoreManifest) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("tree.json"), self.tree.to_json_string())?;
        let (tra, lab) = self.amdp.export_explicit();
        fs::write(dir.join("model.tra"), tra)?;
        fs::write(dir.join("model.lab"), lab)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
        Ok(())
    }

    /// Rebuilds a saved store from its manifest, checking the log digest.
    pub fn open(dir: &Path) -> Result<(Self, StoreManifest), StoreError> {
        let manifest: StoreManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let bytes = fs::read(&manifest.log_path)?;
        let digest = sha256_hex(&bytes);
        if digest != manifest.log_sha256 {
            return Err(StoreError::Manifest(format!(
                "log {} changed since the store was built",
                manifest.log_path.display()
            )));
        }
        let log = TraceLog::from_reader(bytes.as_slice())?;
        let tree = PredicateTree::from_json_str(&fs::read_to_string(dir.join("tree.json"))?)?;
        let store = LinkedStore::build(Arc::new(log), tree, manifest.label_rules.clone())?;
        Ok((store, manifest))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What is needed to rebuild a saved store bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub log_path: PathBuf,
    pub log_sha256: String,
    pub label_rules: Vec<LabelRule>,
    /// Digest of the configuration the tree was learned with.
    pub config_digest: String,
}
