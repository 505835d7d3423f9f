//! Count-based MDP over abstract states, state labeling, and PRISM explicit export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ConcreteState, Partition, Schema, TerminalStatus, TraceLog};
use crate::tree::{Predicate, PredicateTree, StateId, TreeError};

#[derive(Debug, Error)]
pub enum AmdpError {
    #[error("no observations of action `{action}` in state {state}")]
    UnobservedStateAction { state: StateId, action: String },
    #[error("label rule references unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("invalid label rule: {0}")]
    InvalidRule(String),
    #[error("mapping does not cover state {0}")]
    PartialMapping(StateId),
    #[error("explicit model parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

type Successors = BTreeMap<StateId, u64>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Amdp {
    states: BTreeSet<StateId>,
    actions: BTreeSet<String>,
    counts: BTreeMap<StateId, BTreeMap<String, Successors>>,
    initial: BTreeMap<StateId, u64>,
    labels: BTreeMap<String, BTreeSet<StateId>>,
}

impl Amdp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a vertex with no transitions.
    pub fn add_state(&mut self, s: StateId) {
        self.states.insert(s);
    }

    pub fn ingest(&mut self, s: StateId, a: &str, s2: StateId) {
        self.states.insert(s);
        self.states.insert(s2);
        self.actions.insert(a.to_string());
        *self
            .counts
            .entry(s)
            .or_default()
            .entry(a.to_string())
            .or_default()
            .entry(s2)
            .or_insert(0) += 1;
    }

    pub fn add_initial(&mut self, s: StateId) {
        self.states.insert(s);
        *self.initial.entry(s).or_insert(0) += 1;
    }

    /// Induction from a log abstracted under `tree`. Every leaf becomes a
    /// vertex, including leaves no concrete state reaches.
    pub fn induce(log: &TraceLog, tree: &PredicateTree) -> Result<Self, TreeError> {
        let mut m = Amdp::new();
        for s in tree.leaf_states() {
            m.add_state(s);
        }
        for t in log.traces() {
            if let Some(s0) = t.state(0) {
                m.add_initial(tree.abstract_state(s0)?);
            }
            for step in t.steps() {
                let a = tree.abstract_state(&step.pre)?;
                let b = tree.abstract_state(&step.post)?;
                m.ingest(a, &step.action.name, b);
            }
        }
        Ok(m)
    }

    pub fn states(&self) -> &BTreeSet<StateId> {
        &self.states
    }

    pub fn actions(&self) -> &BTreeSet<String> {
        &self.actions
    }

    pub fn count3(&self, s: StateId, a: &str, s2: StateId) -> u64 {
        self.counts
            .get(&s)
            .and_then(|m| m.get(a))
            .and_then(|m| m.get(&s2))
            .copied()
            .unwrap_or(0)
    }

    pub fn count2(&self, s: StateId, a: &str) -> u64 {
        self.counts
            .get(&s)
            .and_then(|m| m.get(a))
            .map_or(0, |m| m.values().sum())
    }

    /// Unsmoothed `C(s,a,s') / C(s,a)`.
    pub fn probability(&self, s: StateId, a: &str, s2: StateId) -> Result<f64, AmdpError> {
        let c2 = self.count2(s, a);
        if c2 == 0 {
            return Err(AmdpError::UnobservedStateAction {
                state: s,
                action: a.to_string(),
            });
        }
        Ok(self.count3(s, a, s2) as f64 / c2 as f64)
    }

    /// Observed actions of `s`, sorted by name.
    pub fn enabled(&self, s: StateId) -> impl Iterator<Item = &str> + '_ {
        self.counts
            .get(&s)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    /// Successors of `(s, a)` with their empirical probabilities.
    pub fn successors(&self, s: StateId, a: &str) -> Vec<(StateId, f64)> {
        let Some(m) = self.counts.get(&s).and_then(|m| m.get(a)) else {
            return Vec::new();
        };
        let total: u64 = m.values().sum();
        m.iter()
            .map(|(&t, &c)| (t, c as f64 / total as f64))
            .collect()
    }

    /// Successor counts of `(s, a)`.
    pub fn successor_counts(&self, s: StateId, a: &str) -> Option<&BTreeMap<StateId, u64>> {
        self.counts.get(&s).and_then(|m| m.get(a))
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.counts.get(&s).is_none_or(|m| m.is_empty())
    }

    pub fn num_transitions(&self) -> u64 {
        self.counts
            .values()
            .flat_map(|m| m.values())
            .flat_map(|m| m.values())
            .sum()
    }

    pub fn initial_counts(&self) -> &BTreeMap<StateId, u64> {
        &self.initial
    }

    /// Most frequent initial state; ties go to the smallest id.
    pub fn modal_initial(&self) -> Option<StateId> {
        let mut best: Option<(StateId, u64)> = None;
        for (&s, &c) in &self.initial {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((s, c));
            }
        }
        best.map(|(s, _)| s)
    }

    pub fn labels(&self) -> &BTreeMap<String, BTreeSet<StateId>> {
        &self.labels
    }

    /// States carrying `name`; empty when the label is unknown.
    pub fn label(&self, name: &str) -> BTreeSet<StateId> {
        self.labels.get(name).cloned().unwrap_or_default()
    }

    pub fn set_label(&mut self, name: impl Into<String>, states: BTreeSet<StateId>) {
        self.labels.insert(name.into(), states);
    }

    /// Applies label rules over per-state concrete evidence. Returns, per
    /// rule, the states where the rule held on some but not all evidence.
    pub fn label_states(
        &mut self,
        rules: &[LabelRule],
        evidence: &Evidence<'_>,
        schema: &Schema,
    ) -> Result<LabelReport, AmdpError> {
        for r in rules {
            r.validate(schema)?;
        }
        let mut report = LabelReport::default();
        for r in rules {
            let mut labeled = BTreeSet::new();
            let mut mixed = BTreeSet::new();
            for &s in &self.states {
                let Some(items) = evidence.get(&s).filter(|v| !v.is_empty()) else {
                    continue;
                };
                let mut hits = 0usize;
                for item in items {
                    hits += r.holds(item)? as usize;
                }
                let all = hits == items.len();
                let holds = match r.mode {
                    AggregationMode::All => all,
                    AggregationMode::Any => hits > 0,
                };
                if holds {
                    labeled.insert(s);
                }
                if hits > 0 && !all {
                    mixed.insert(s);
                }
            }
            self.labels.insert(r.name.clone(), labeled);
            report.mixed.insert(r.name.clone(), mixed);
        }
        Ok(report)
    }

    /// Re-aggregates counts under a total state mapping. A merged state keeps
    /// a label only if every state mapped onto it carried it.
    pub fn remap(&self, mapping: &BTreeMap<StateId, StateId>) -> Result<Amdp, AmdpError> {
        let f = |s: StateId| mapping.get(&s).copied().ok_or(AmdpError::PartialMapping(s));
        let mut m = Amdp::new();
        for &s in &self.states {
            m.add_state(f(s)?);
        }
        for (&s, by_action) in &self.counts {
            for (a, succ) in by_action {
                m.actions.insert(a.clone());
                for (&t, &c) in succ {
                    *m.counts
                        .entry(f(s)?)
                        .or_default()
                        .entry(a.clone())
                        .or_default()
                        .entry(f(t)?)
                        .or_insert(0) += c;
                }
            }
        }
        for (&s, &c) in &self.initial {
            *m.initial.entry(f(s)?).or_insert(0) += c;
        }
        for (name, set) in &self.labels {
            let mut preimage: BTreeMap<StateId, bool> = BTreeMap::new();
            for &s in &self.states {
                let e = preimage.entry(f(s)?).or_insert(true);
                *e &= set.contains(&s);
            }
            m.labels.insert(
                name.clone(),
                preimage.into_iter().filter(|(_, v)| *v).map(|(k, _)| k).collect(),
            );
        }
        Ok(m)
    }

    /// Dense index order used by the explicit export (sorted stable ids).
    pub fn dense_order(&self) -> Vec<StateId> {
        self.states.iter().copied().collect()
    }

    /// PRISM explicit-state `(transitions, labels)` text. Terminal states get
    /// a probability-one self-loop choice without an action name.
    pub fn export_explicit(&self) -> (String, String) {
        let order = self.dense_order();
        let index: BTreeMap<StateId, usize> =
            order.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut lines = Vec::new();
        let mut choices = 0usize;
        for (i, &s) in order.iter().enumerate() {
            if self.is_terminal(s) {
                choices += 1;
                lines.push(format!("{i} 0 {i} 1"));
                continue;
            }
            for (c, a) in self.enabled(s).enumerate() {
                choices += 1;
                for (t, p) in self.successors(s, a) {
                    lines.push(format!("{i} {c} {} {p} {a}", index[&t]));
                }
            }
        }
        let mut tra = format!("{} {} {}\n", order.len(), choices, lines.len());
        for l in &lines {
            tra.push_str(l);
            tra.push('\n');
        }

        let mut names: Vec<&str> = vec!["init", "success", "failure"];
        for k in self.labels.keys() {
            if !names.contains(&k.as_str()) {
                names.push(k);
            }
        }
        let mut per_state: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for &s in self.initial.keys() {
            per_state.entry(index[&s]).or_default().push("init");
        }
        for name in &names[1..] {
            for s in self.labels.get(*name).into_iter().flatten() {
                if let Some(&i) = index.get(s) {
                    per_state.entry(i).or_default().push(name);
                }
            }
        }
        let mut lab = format!("#DECLARATION\n{}\n#END\n", names.join(" "));
        for (i, ls) in per_state {
            let _ = writeln!(lab, "{i} {}", ls.join(" "));
        }
        (tra, lab)
    }
}

/// Parsed form of an explicit export, used for round-trip checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitModel {
    pub num_states: usize,
    pub num_choices: usize,
    /// `(src, choice, dst, prob, action)`.
    pub transitions: Vec<(usize, usize, usize, f64, Option<String>)>,
    pub declared_labels: Vec<String>,
    pub labels: BTreeMap<usize, Vec<String>>,
}

impl ExplicitModel {
    pub fn parse(tra: &str, lab: &str) -> Result<Self, AmdpError> {
        let err = |m: String| AmdpError::Parse(m);
        let mut lines = tra.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| err("missing header".into()))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|e| err(format!("header: {e}"))))
            .collect::<Result<_, _>>()?;
        let [num_states, num_choices, num_transitions] = header[..] else {
            return Err(err("header needs three fields".into()));
        };
        let mut transitions = Vec::new();
        for (n, l) in lines.enumerate() {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 && f.len() != 5 {
                return Err(err(format!("line {}: expected 4 or 5 fields", n + 2)));
            }
            let num = |i: usize| -> Result<usize, AmdpError> {
                f[i].parse().map_err(|e| err(format!("line {}: {e}", n + 2)))
            };
            let p: f64 = f[3].parse().map_err(|e| err(format!("line {}: {e}", n + 2)))?;
            transitions.push((num(0)?, num(1)?, num(2)?, p, f.get(4).map(|s| s.to_string())));
        }
        if transitions.len() != num_transitions {
            return Err(err(format!(
                "header declares {num_transitions} transitions, found {}",
                transitions.len()
            )));
        }
        let mut lab_lines = lab.lines();
        if lab_lines.next() != Some("#DECLARATION") {
            return Err(err("labels must start with #DECLARATION".into()));
        }
        let declared_labels: Vec<String> = lab_lines
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .map(String::from)
            .collect();
        if lab_lines.next() != Some("#END") {
            return Err(err("missing #END".into()));
        }
        let mut labels = BTreeMap::new();
        for l in lab_lines {
            let mut f = l.split_whitespace();
            let i: usize = f
                .next()
                .ok_or_else(|| err("empty label line".into()))?
                .parse()
                .map_err(|e| err(format!("label state: {e}")))?;
            let ls: Vec<String> = f.map(String::from).collect();
            if let Some(bad) = ls.iter().find(|l| !declared_labels.contains(l)) {
                return Err(err(format!("undeclared label `{bad}`")));
            }
            labels.insert(i, ls);
        }
        Ok(ExplicitModel {
            num_states,
            num_choices,
            transitions,
            declared_labels,
            labels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    All,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum LabelCondition {
    /// Conjunction of atoms over check or goal variables.
    Predicate { atoms: Vec<Predicate> },
    /// The state is the final state of a trace with this status.
    TerminalStatus { status: TerminalStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub name: String,
    #[serde(flatten)]
    pub condition: LabelCondition,
    #[serde(default)]
    pub mode: AggregationMode,
}

impl LabelRule {
    pub fn atoms(name: impl Into<String>, atoms: Vec<Predicate>, mode: AggregationMode) -> Self {
        LabelRule {
            name: name.into(),
            condition: LabelCondition::Predicate { atoms },
            mode,
        }
    }

    pub fn terminal(name: impl Into<String>, status: TerminalStatus) -> Self {
        LabelRule {
            name: name.into(),
            condition: LabelCondition::TerminalStatus { status },
            mode: AggregationMode::All,
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), AmdpError> {
        let LabelCondition::Predicate { atoms } = &self.condition else {
            return Ok(());
        };
        for p in atoms {
            if !matches!(p, Predicate::BooleanEq { .. } | Predicate::ScalarThreshold { .. }) {
                return Err(AmdpError::InvalidRule(format!(
                    "`{}`: atoms must be boolean or threshold tests, got `{p}`",
                    self.name
                )));
            }
            let (part, tag) = schema
                .get(p.var())
                .ok_or_else(|| AmdpError::UnknownVariable(p.var().to_string()))?;
            if part == Partition::State {
                return Err(AmdpError::InvalidRule(format!(
                    "`{}`: `{}` is a state variable; rules use check or goal variables",
                    self.name,
                    p.var()
                )));
            }
            if !p.accepts(tag) {
                return Err(AmdpError::InvalidRule(format!(
                    "`{}`: `{p}` does not apply to a {tag} variable",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn holds(&self, item: &EvidenceItem<'_>) -> Result<bool, AmdpError> {
        match &self.condition {
            LabelCondition::Predicate { atoms } => {
                for p in atoms {
                    if !p.eval(item.state)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            LabelCondition::TerminalStatus { status } => Ok(item.terminal == Some(*status)),
        }
    }
}

/// The built-in success/failure rules keyed on terminal status.
pub fn terminal_status_rules() -> Vec<LabelRule> {
    vec![
        LabelRule::terminal("success", TerminalStatus::Success),
        LabelRule::terminal("failure", TerminalStatus::Failure),
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelReport {
    /// Per rule: states where the rule held on some but not all evidence.
    pub mixed: BTreeMap<String, BTreeSet<StateId>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvidenceItem<'a> {
    pub state: &'a ConcreteState,
    /// Set when this is the last state of its trace.
    pub terminal: Option<TerminalStatus>,
}

/// Observed concrete states per abstract state.
pub type Evidence<'a> = BTreeMap<StateId, Vec<EvidenceItem<'a>>>;

pub fn collect_evidence<'a>(
    log: &'a TraceLog,
    tree: &PredicateTree,
) -> Result<Evidence<'a>, TreeError> {
    let mut ev: Evidence<'a> = BTreeMap::new();
    for t in log.traces() {
        let last = t.num_states().saturating_sub(1);
        for (pos, s) in t.states().enumerate() {
            ev.entry(tree.abstract_state(s)?).or_default().push(EvidenceItem {
                state: s,
                terminal: (pos == last).then_some(t.terminal_status()),
            });
        }
    }
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ActionSymbol, Trace, Transition, Value};
    use proptest::prelude::*;

    fn sid(i: u64) -> StateId {
        StateId(i)
    }

    #[test]
    fn ingest_and_probability() {
        let mut m = Amdp::new();
        m.ingest(sid(0), "a", sid(1));
        assert_eq!(m.count3(sid(0), "a", sid(1)), 1);
        assert_eq!(m.count2(sid(0), "a"), 1);
        m.ingest(sid(0), "a", sid(2));
        assert_eq!(m.probability(sid(0), "a", sid(1)).unwrap(), 0.5);
        assert_eq!(m.probability(sid(0), "a", sid(3)).unwrap(), 0.0);
        for _ in 0..2 {
            m.ingest(sid(0), "a", sid(1));
        }
        assert_eq!(m.probability(sid(0), "a", sid(1)).unwrap(), 0.75);
        assert!(matches!(
            m.probability(sid(1), "a", sid(1)),
            Err(AmdpError::UnobservedStateAction { .. })
        ));
        assert!(m.is_terminal(sid(1)));
        assert!(!m.is_terminal(sid(0)));
    }

    #[test]
    fn export_small_and_empty() {
        let mut m = Amdp::new();
        m.add_initial(sid(0));
        m.ingest(sid(0), "go", sid(1));
        m.set_label("success", [sid(1)].into());
        let (tra, lab) = m.export_explicit();
        assert_eq!(tra, "2 2 2\n0 0 1 1 go\n1 0 1 1\n");
        assert_eq!(tra.lines().count(), 3);
        assert_eq!(lab, "#DECLARATION\ninit success failure\n#END\n0 init\n1 success\n");
        let parsed = ExplicitModel::parse(&tra, &lab).unwrap();
        assert_eq!(parsed.num_states, 2);
        assert_eq!(parsed.transitions[0], (0, 0, 1, 1.0, Some("go".into())));

        let (tra, _) = Amdp::new().export_explicit();
        assert_eq!(tra, "0 0 0\n");
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(ExplicitModel::parse("", "").is_err());
        assert!(ExplicitModel::parse("1 1 2\n0 0 0 1\n", "#DECLARATION\n\n#END\n").is_err());
        assert!(ExplicitModel::parse("1 1 1\n0 0 0 1\n", "#DECLARATION\ninit\n#END\n0 bogus\n").is_err());
    }

    fn st(flag: bool, ok: bool, n: i64) -> ConcreteState {
        ConcreteState::new(
            [("budget".to_string(), Value::Integer(10))].into(),
            [
                ("testsPassed".to_string(), Value::Boolean(flag)),
                ("committed".to_string(), Value::Boolean(ok)),
            ]
            .into(),
            [("n".to_string(), Value::Integer(n))].into(),
        )
        .unwrap()
    }

    fn trace(id: &str, states: Vec<ConcreteState>, status: TerminalStatus) -> Trace {
        let steps = states
            .windows(2)
            .map(|w| Transition { pre: w[0].clone(), action: ActionSymbol::new("step"), post: w[1].clone() })
            .collect();
        Trace::new(id, Some(states[0].clone()), steps, status).unwrap()
    }

    fn labeled_fixture() -> (TraceLog, PredicateTree) {
        let mut log = TraceLog::new();
        log.push(trace("a", vec![st(false, false, 0), st(true, true, 1)], TerminalStatus::Success)).unwrap();
        log.push(trace("b", vec![st(false, false, 0), st(true, false, 2)], TerminalStatus::Failure)).unwrap();
        // leaves: n > 1.5 (s2) holds the second trace's final state, n > 0.5 & ≤ 1.5 the first
        let (t, (_, hi)) = PredicateTree::single_leaf()
            .with_split(sid(0), Predicate::ScalarThreshold { var: "n".into(), threshold: 0.5 })
            .unwrap();
        let (t, _) = t.with_split(hi, Predicate::ScalarThreshold { var: "n".into(), threshold: 1.5 }).unwrap();
        (log, t)
    }

    #[test]
    fn labeling_all_any_and_mixed() {
        let (log, tree) = labeled_fixture();
        let ev = collect_evidence(&log, &tree).unwrap();
        let both = vec![
            Predicate::BooleanEq { var: "testsPassed".into(), expected: true },
            Predicate::BooleanEq { var: "committed".into(), expected: true },
        ];
        let mut m = Amdp::induce(&log, &tree).unwrap();
        let rep = m
            .label_states(&[LabelRule::atoms("success", both.clone(), AggregationMode::All)], &ev, log.schema())
            .unwrap();
        assert_eq!(m.label("success"), [sid(3)].into());
        assert!(rep.mixed["success"].is_empty());

        // coarse tree: both finals share one leaf, testsPassed agrees but committed does not
        let (coarse, (_, hi)) = PredicateTree::single_leaf()
            .with_split(sid(0), Predicate::ScalarThreshold { var: "n".into(), threshold: 0.5 })
            .unwrap();
        let ev = collect_evidence(&log, &coarse).unwrap();
        let mut m = Amdp::induce(&log, &coarse).unwrap();
        let rep = m
            .label_states(
                &[
                    LabelRule::atoms("success", both.clone(), AggregationMode::All),
                    LabelRule::atoms("maybe", both, AggregationMode::Any),
                    LabelRule::terminal("failure", TerminalStatus::Failure),
                ],
                &ev,
                log.schema(),
            )
            .unwrap();
        assert!(m.label("success").is_empty());
        assert_eq!(rep.mixed["success"], [hi].into());
        assert_eq!(m.label("maybe"), [hi].into());
        assert!(m.label("failure").is_empty());
        assert_eq!(rep.mixed["failure"], [hi].into());

        let bad = LabelRule::atoms("x", vec![Predicate::BooleanEq { var: "nope".into(), expected: true }], AggregationMode::All);
        assert!(matches!(m.label_states(&[bad], &ev, log.schema()), Err(AmdpError::UnknownVariable(_))));
        let state_var = LabelRule::atoms("x", vec![Predicate::ScalarThreshold { var: "n".into(), threshold: 0.0 }], AggregationMode::All);
        assert!(matches!(m.label_states(&[state_var], &ev, log.schema()), Err(AmdpError::InvalidRule(_))));
        let goal_var = LabelRule::atoms("x", vec![Predicate::ScalarThreshold { var: "budget".into(), threshold: 5.0 }], AggregationMode::All);
        m.label_states(&[goal_var], &ev, log.schema()).unwrap();
    }

    #[test]
    fn remap_identity_and_merge() {
        let (log, fine) = labeled_fixture();
        let mut m = Amdp::induce(&log, &fine).unwrap();
        m.set_label("success", [sid(3)].into());
        let id: BTreeMap<_, _> = m.states().iter().map(|&s| (s, s)).collect();
        assert_eq!(m.remap(&id).unwrap(), m);

        // merge the two fine leaves back into the coarse one
        let merge: BTreeMap<_, _> = [(sid(1), sid(1)), (sid(3), sid(2)), (sid(4), sid(2))].into();
        let merged = m.remap(&merge).unwrap();
        let (coarse, _) = PredicateTree::single_leaf()
            .with_split(sid(0), Predicate::ScalarThreshold { var: "n".into(), threshold: 0.5 })
            .unwrap();
        let mut fresh = Amdp::induce(&log, &coarse).unwrap();
        fresh.set_label("success", BTreeSet::new());
        assert_eq!(merged, fresh);
        assert_eq!(merged.count3(sid(1), "step", sid(2)), 2);
        assert!(m.remap(&BTreeMap::new()).is_err());
    }

    fn arb_amdp() -> impl Strategy<Value = Amdp> {
        proptest::collection::vec((0u64..6, 0usize..3, 0u64..6, 1u64..5), 0..40).prop_map(|edges| {
            let mut m = Amdp::new();
            m.add_initial(sid(0));
            for (s, a, t, k) in edges {
                for _ in 0..k {
                    m.ingest(sid(s), ["a", "b", "c"][a], sid(t));
                }
            }
            m.set_label("success", m.states().iter().copied().filter(|s| s.0 % 2 == 1).collect());
            m
        })
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(m in arb_amdp()) {
            for &s in m.states() {
                for a in m.enabled(s) {
                    let sum: f64 = m.states().iter().map(|&t| m.probability(s, a, t).unwrap()).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn export_round_trips(m in arb_amdp()) {
            let (tra, lab) = m.export_explicit();
            prop_assert_eq!(m.export_explicit(), (tra.clone(), lab.clone()));
            let parsed = ExplicitModel::parse(&tra, &lab).unwrap();
            let order = m.dense_order();
            prop_assert_eq!(parsed.num_states, order.len());
            let mut seen = 0;
            for (src, _, dst, p, action) in &parsed.transitions {
                match action {
                    Some(a) => {
                        prop_assert_eq!(*p, m.probability(order[*src], a, order[*dst]).unwrap());
                        seen += 1;
                    }
                    None => {
                        prop_assert!(m.is_terminal(order[*src]));
                        prop_assert_eq!(src, dst);
                    }
                }
            }
            let expected: usize = m.states().iter()
                .flat_map(|&s| m.enabled(s).map(move |a| (s, a)))
                .map(|(s, a)| m.successors(s, a).len()).sum();
            prop_assert_eq!(seen, expected);
            for (i, ls) in &parsed.labels {
                prop_assert_eq!(ls.contains(&"success".to_string()), m.label("success").contains(&order[*i]));
            }
        }
    }
}
