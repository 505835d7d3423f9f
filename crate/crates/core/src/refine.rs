//! Counterexample-guided refinement: check a thresholded property, classify
//! the witness against the trie, and split the leaf where it leaves the log.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::amdp::{AmdpError, LabelRule};
use crate::checker::{check, CheckError, CheckerConfig, ReachQuery, Relation, Verdict};
use crate::store::{LinkedStore, StoreError};
use crate::trace::{StateRef, TraceLog};
use crate::tree::{split_leaf, Exclusion, NoSplitReason, Predicate, PredicateTree, SplitOutcome, StateId, TreeConfig, TreeError};
use crate::trie::AbstractPath;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refinement configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Amdp(#[from] AmdpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    /// Gain threshold, depth, leaf-count and leaf-size bounds for splits.
    pub tree: TreeConfig,
    pub max_iterations: usize,
    pub property: ReachQuery,
    pub checker: CheckerConfig,
}

impl RefinementConfig {
    pub fn new(property: ReachQuery) -> Self {
        RefinementConfig {
            tree: TreeConfig::default(),
            max_iterations: 20,
            property,
            checker: CheckerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.property.threshold.is_none() {
            return Err(RefineError::InvalidConfig(
                "the property needs a threshold; unthresholded queries are report-only".into(),
            ));
        }
        if self.tree.max_depth == 0 || self.tree.max_leaves == 0 {
            return Err(RefineError::InvalidConfig("depth and leaf bounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Concretization {
    /// Every step is supported; refs are the concrete states at the witness's last node.
    Real { refs: Vec<StateRef> },
    /// The prefix of length `k` is supported, `k + 1` is not; `leaf` is `s_k`.
    Spurious { k: usize, leaf: StateId },
}

pub fn concretize(store: &LinkedStore, witness: &AbstractPath) -> Concretization {
    match store.trie().earliest_divergence(witness) {
        None => {
            let node = store.trie().node_at(witness).expect("supported path has a node");
            Concretization::Real {
                refs: store.trie().node(node).expect("node exists").record_refs.iter().copied().collect(),
            }
        }
        Some(k) => Concretization::Spurious {
            k,
            leaf: witness.states()[k],
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineStep {
    Split {
        leaf: StateId,
        predicate: Predicate,
        gain: f64,
        children: (StateId, StateId),
    },
    NoBeneficialSplit(NoSplitReason),
}

/// Splits `leaf` on the max-gain predicate over its concrete states.
pub fn refine_once(store: &mut LinkedStore, leaf: StateId, cfg: &TreeConfig) -> Result<RefineStep, RefineError> {
    let tree = store.tree();
    let node = tree.leaf_node(leaf).ok_or(TreeError::UnknownLeaf(leaf))?;
    let path = tree.path_to(node).unwrap_or_default();
    let excluded = Exclusion::for_path(&path, cfg.exclusion);
    let batch = store.batch_for_leaf(leaf);
    if batch.is_empty() {
        return Ok(RefineStep::NoBeneficialSplit(NoSplitReason::TooSmall));
    }
    match split_leaf(tree, leaf, &batch, &excluded, cfg)? {
        SplitOutcome::NoBeneficialSplit(r) => Ok(RefineStep::NoBeneficialSplit(r)),
        SplitOutcome::Split(split) => {
            store.apply_split(&split)?;
            Ok(RefineStep::Split {
                leaf,
                predicate: split.predicate,
                gain: split.gain,
                children: split.children,
            })
        }
    }
}

/// Splits `leaf` so as to separate states where the rule `rule` holds from
/// those where it fails; used when next actions cannot tell them apart.
pub fn refine_by_label(
    store: &mut LinkedStore,
    leaf: StateId,
    rule: &str,
    cfg: &TreeConfig,
) -> Result<RefineStep, RefineError> {
    let tree = store.tree();
    let node = tree.leaf_node(leaf).ok_or(TreeError::UnknownLeaf(leaf))?;
    let excluded = Exclusion::for_path(&tree.path_to(node).unwrap_or_default(), cfg.exclusion);
    let batch = match store.rule_batch_for_leaf(leaf, rule)? {
        Some(b) if !b.is_empty() => b,
        _ => return Ok(RefineStep::NoBeneficialSplit(NoSplitReason::TooSmall)),
    };
    match split_leaf(tree, leaf, &batch, &excluded, cfg)? {
        SplitOutcome::NoBeneficialSplit(r) => Ok(RefineStep::NoBeneficialSplit(r)),
        SplitOutcome::Split(split) => {
            store.apply_split(&split)?;
            Ok(RefineStep::Split {
                leaf,
                predicate: split.predicate,
                gain: split.gain,
                children: split.children,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationAction {
    Split,
    RealCe,
    Stop,
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub leaves: usize,
    pub bound: f64,
    pub verdict: Verdict,
    pub action: IterationAction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaf_split: Option<StateId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustedReason {
    MaxIterations,
    NoBeneficialSplit,
    NoWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LoopResult {
    Verified,
    RealCounterexample { witness: AbstractPath, refs: Vec<StateRef> },
    Exhausted { reason: ExhaustedReason },
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub result: LoopResult,
    pub iterations: Vec<IterationRecord>,
    pub store: LinkedStore,
}

pub fn verify_refine_loop(
    log: Arc<TraceLog>,
    tree: PredicateTree,
    rules: Vec<LabelRule>,
    cfg: &RefinementConfig,
) -> Result<LoopOutcome, RefineError> {
    verify_refine_loop_with(log, tree, rules, cfg, |_, _| {})
}

/// As [`verify_refine_loop`], calling `observe` with the store after each iteration.
pub fn verify_refine_loop_with(
    log: Arc<TraceLog>,
    tree: PredicateTree,
    rules: Vec<LabelRule>,
    cfg: &RefinementConfig,
    mut observe: impl FnMut(&LinkedStore, &IterationRecord),
) -> Result<LoopOutcome, RefineError> {
    cfg.validate()?;
    let mut store = LinkedStore::build(log, tree, rules)?;
    let mut iterations = Vec::new();
    let upper_bound = matches!(cfg.property.threshold, Some((Relation::Le | Relation::Lt, _)));
    for iter in 0..cfg.max_iterations {
        let res = check(store.amdp(), &cfg.property, &cfg.checker)?;
        let verdict = res.verdict.clone().expect("thresholded property");
        let mut record = IterationRecord {
            iter,
            leaves: store.tree().num_leaves(),
            bound: res.value,
            verdict: verdict.clone(),
            action: IterationAction::Stop,
            leaf_split: None,
            predicate: None,
        };
        let finish = |record: IterationRecord, result, store: LinkedStore, mut iterations: Vec<IterationRecord>, observe: &mut dyn FnMut(&LinkedStore, &IterationRecord)| {
            observe(&store, &record);
            iterations.push(record);
            Ok(LoopOutcome { result, iterations, store })
        };
        let mixed: Vec<StateId> = store
            .label_report()
            .mixed
            .get(&cfg.property.target)
            .map(|m| m.iter().copied().collect())
            .unwrap_or_default();
        let satisfied = verdict == Verdict::Satisfied;
        // a verdict over leaves with ambiguous target evidence is only
        // accepted once those leaves cannot be split further
        if satisfied && mixed.is_empty() {
            return finish(record, LoopResult::Verified, store, iterations, &mut observe);
        }

        // leaves to try, most specific first
        let mut by_label = false;
        let candidates: Vec<StateId> = match res.witness.filter(|_| upper_bound && !satisfied) {
            Some(w) => match concretize(&store, &w.path) {
                Concretization::Real { refs } => {
                    record.action = IterationAction::RealCe;
                    let result = LoopResult::RealCounterexample { witness: w.path, refs };
                    return finish(record, result, store, iterations, &mut observe);
                }
                Concretization::Spurious { k, .. } => w.path.states()[..=k].iter().rev().copied().collect(),
            },
            // no path witness: refine leaves whose target label is ambiguous
            None => {
                by_label = true;
                mixed
            }
        };
        if candidates.is_empty() {
            let result = LoopResult::Exhausted { reason: ExhaustedReason::NoWitness };
            return finish(record, result, store, iterations, &mut observe);
        }
        let mut split = None;
        for leaf in candidates {
            let mut step = refine_once(&mut store, leaf, &cfg.tree)?;
            if by_label && matches!(step, RefineStep::NoBeneficialSplit(_)) {
                step = refine_by_label(&mut store, leaf, &cfg.property.target, &cfg.tree)?;
            }
            if let RefineStep::Split { leaf, predicate, .. } = step {
                split = Some((leaf, predicate));
                break;
            }
        }
        match split {
            Some((leaf, predicate)) => {
                record.action = IterationAction::Split;
                record.leaf_split = Some(leaf);
                record.predicate = Some(predicate.to_string());
                observe(&store, &record);
                iterations.push(record);
            }
            None if satisfied => return finish(record, LoopResult::Verified, store, iterations, &mut observe),
            None => {
                let result = LoopResult::Exhausted { reason: ExhaustedReason::NoBeneficialSplit };
                return finish(record, result, store, iterations, &mut observe);
            }
        }
    }
    Ok(LoopOutcome {
        result: LoopResult::Exhausted { reason: ExhaustedReason::MaxIterations },
        iterations,
        store,
    })
}
