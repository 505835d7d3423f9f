//! Reachability checking on an [`Amdp`]: value iteration for `Pmax`/`Pmin`
//! of eventually reaching a labeled set, threshold verdicts, and a
//! most-probable witness path under an optimal memoryless scheduler.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amdp::Amdp;
use crate::tree::StateId;
use crate::trie::AbstractPath;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("value iteration did not converge in {iterations} iterations (last change {delta:e})")]
    NotConverged {
        iterations: usize,
        delta: f64,
        values: BTreeMap<StateId, f64>,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("model has no initial state")]
    NoInitialState,
    #[error("invalid checker configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot parse property `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Relation {
    pub fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Relation::Lt => value < bound,
            Relation::Le => value <= bound,
            Relation::Gt => value > bound,
            Relation::Ge => value >= bound,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Relation::Lt => "<",
            Relation::Le => "<=",
            Relation::Gt => ">",
            Relation::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachQuery {
    pub direction: Direction,
    pub target: String,
    pub threshold: Option<(Relation, f64)>,
}

impl ReachQuery {
    pub fn new(direction: Direction, target: impl Into<String>) -> Self {
        ReachQuery {
            direction,
            target: target.into(),
            threshold: None,
        }
    }

    pub fn bounded(mut self, rel: Relation, bound: f64) -> Self {
        self.threshold = Some((rel, bound));
        self
    }
}

impl fmt::Display for ReachQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.direction {
            Direction::Max => "Pmax",
            Direction::Min => "Pmin",
        };
        match self.threshold {
            Some((r, t)) => write!(f, "{d}{}{t} [F \"{}\"]", r.as_str(), self.target),
            None => write!(f, "{d}=? [F \"{}\"]", self.target),
        }
    }
}

impl FromStr for ReachQuery {
    type Err = CheckError;

    /// Accepts `Pmax=? [F "label"]` and `Pmin>=0.1 [F "label"]` forms.
    fn from_str(s: &str) -> Result<Self, CheckError> {
        let fail = || CheckError::Parse(s.to_string());
        let t = s.trim();
        let (direction, rest) = if let Some(r) = t.strip_prefix("Pmax") {
            (Direction::Max, r)
        } else if let Some(r) = t.strip_prefix("Pmin") {
            (Direction::Min, r)
        } else {
            return Err(fail());
        };
        let open = rest.find('[').ok_or_else(fail)?;
        let (bound, body) = rest.split_at(open);
        let bound = bound.trim();
        let threshold = if bound == "=?" {
            None
        } else {
            let (rel, num) = [("<=", Relation::Le), (">=", Relation::Ge), ("<", Relation::Lt), (">", Relation::Gt)]
                .iter()
                .find_map(|(p, r)| bound.strip_prefix(p).map(|n| (*r, n)))
                .ok_or_else(fail)?;
            let v: f64 = num.trim().parse().map_err(|_| fail())?;
            if !(0.0..=1.0).contains(&v) {
                return Err(fail());
            }
            Some((rel, v))
        };
        let inner = body
            .trim()
            .strip_prefix('[')
            .and_then(|b| b.strip_suffix(']'))
            .ok_or_else(fail)?
            .trim();
        let label = inner
            .strip_prefix('F')
            .ok_or_else(fail)?
            .trim()
            .strip_prefix('"')
            .and_then(|l| l.strip_suffix('"'))
            .ok_or_else(fail)?;
        if label.is_empty() || label.contains('"') {
            return Err(fail());
        }
        Ok(ReachQuery {
            direction,
            target: label.to_string(),
            threshold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMode {
    /// The most frequent initial abstract state.
    #[default]
    Modal,
    /// The observed initial state least favorable to the property.
    WorstCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckerConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub initial: InitialMode,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        CheckerConfig {
            epsilon: 1e-8,
            max_iters: 100_000,
            initial: InitialMode::Modal,
        }
    }
}

/// Dense view of the model for iteration.
struct Dense {
    ids: Vec<StateId>,
    /// Per state: `(action, [(successor, probability)])` in action-name order.
    choices: Vec<Vec<(String, Vec<(usize, f64)>)>>,
    target: Vec<bool>,
}

impl Dense {
    fn new(amdp: &Amdp, target: &str) -> Result<Self, CheckError> {
        let labeled = amdp
            .labels()
            .get(target)
            .ok_or_else(|| CheckError::UnknownLabel(target.to_string()))?;
        let ids = amdp.dense_order();
        let index: BTreeMap<StateId, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let choices = ids
            .iter()
            .map(|&s| {
                amdp.enabled(s)
                    .map(|a| {
                        let succ = amdp.successors(s, a).into_iter().map(|(t, p)| (index[&t], p)).collect();
                        (a.to_string(), succ)
                    })
                    .collect()
            })
            .collect();
        let target = ids.iter().map(|s| labeled.contains(s)).collect();
        Ok(Dense { ids, choices, target })
    }

    fn n(&self) -> usize {
        self.ids.len()
    }

    /// States that may reach the target under some scheduler.
    fn can_reach(&self) -> Vec<bool> {
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); self.n()];
        for (s, cs) in self.choices.iter().enumerate() {
            for (_, succ) in cs {
                for &(t, p) in succ {
                    if p > 0.0 {
                        preds[t].push(s);
                    }
                }
            }
        }
        let mut reach = self.target.clone();
        let mut queue: VecDeque<usize> = (0..self.n()).filter(|&i| reach[i]).collect();
        while let Some(t) = queue.pop_front() {
            for &s in &preds[t] {
                if !reach[s] {
                    reach[s] = true;
                    queue.push_back(s);
                }
            }
        }
        reach
    }

    /// States from which some scheduler avoids the target with probability one.
    fn can_avoid(&self) -> Vec<bool> {
        let mut avoid: Vec<bool> = self.target.iter().map(|t| !t).collect();
        loop {
            let mut changed = false;
            for s in 0..self.n() {
                if !avoid[s] || self.choices[s].is_empty() {
                    continue;
                }
                let ok = self.choices[s]
                    .iter()
                    .any(|(_, succ)| succ.iter().all(|&(t, p)| p == 0.0 || avoid[t]));
                if !ok {
                    avoid[s] = false;
                    changed = true;
                }
            }
            if !changed {
                return avoid;
            }
        }
    }

    /// States where some scheduler reaches the target with probability one.
    fn sure_some(&self) -> Vec<bool> {
        let n = self.n();
        let mut u = vec![true; n];
        loop {
            let mut r = self.target.clone();
            loop {
                let mut changed = false;
                for s in 0..n {
                    if r[s] || !u[s] {
                        continue;
                    }
                    let ok = self.choices[s].iter().any(|(_, succ)| {
                        let live = || succ.iter().filter(|&&(_, p)| p > 0.0);
                        live().all(|&(t, _)| u[t]) && live().any(|&(t, _)| r[t])
                    });
                    if ok {
                        r[s] = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            if r == u {
                return u;
            }
            u = r;
        }
    }

    /// States where every scheduler reaches the target with probability one:
    /// those that cannot reach an avoiding state without passing the target.
    fn sure_all(&self) -> Vec<bool> {
        let n = self.n();
        let mut bad = self.can_avoid();
        loop {
            let mut changed = false;
            for s in 0..n {
                if bad[s] || self.target[s] {
                    continue;
                }
                let hit = self.choices[s]
                    .iter()
                    .any(|(_, succ)| succ.iter().any(|&(t, p)| p > 0.0 && bad[t]));
                if hit {
                    bad[s] = true;
                    changed = true;
                }
            }
            if !changed {
                return bad.iter().map(|b| !b).collect();
            }
        }
    }

    fn q(&self, x: &[f64], s: usize, c: usize) -> f64 {
        self.choices[s][c].1.iter().map(|&(t, p)| p * x[t]).sum()
    }
}

/// Step-wise value iteration from the zero vector; graph pre-passes pin
/// states whose value is exactly zero or one.
pub struct ValueIterator {
    dense: Dense,
    direction: Direction,
    zero: Vec<bool>,
    /// Pinned to one by the graph pre-pass.
    one: Vec<bool>,
    x: Vec<f64>,
    iterations: usize,
}

impl ValueIterator {
    pub fn new(amdp: &Amdp, direction: Direction, target: &str) -> Result<Self, CheckError> {
        let dense = Dense::new(amdp, target)?;
        let reach = dense.can_reach();
        let zero: Vec<bool> = match direction {
            Direction::Max => reach.iter().map(|r| !r).collect(),
            Direction::Min => {
                let avoid = dense.can_avoid();
                reach.iter().zip(&avoid).map(|(r, a)| !r || *a).collect()
            }
        };
        let one = match direction {
            Direction::Max => dense.sure_some(),
            Direction::Min => dense.sure_all(),
        };
        let x = one.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        Ok(ValueIterator {
            dense,
            direction,
            zero,
            one,
            x,
            iterations: 0,
        })
    }

    /// One synchronous update; returns the max-norm change.
    pub fn step(&mut self) -> f64 {
        let d = &self.dense;
        let mut next = self.x.clone();
        for s in 0..d.n() {
            if self.one[s] || self.zero[s] || d.choices[s].is_empty() {
                continue;
            }
            let qs = (0..d.choices[s].len()).map(|c| d.q(&self.x, s, c));
            let v = match self.direction {
                Direction::Max => qs.fold(f64::NEG_INFINITY, f64::max),
                Direction::Min => qs.fold(f64::INFINITY, f64::min),
            };
            next[s] = v.clamp(0.0, 1.0);
        }
        let delta = next
            .iter()
            .zip(&self.x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.x = next;
        self.iterations += 1;
        delta
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }

    pub fn state_ids(&self) -> &[StateId] {
        &self.dense.ids
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn value_map(&self) -> BTreeMap<StateId, f64> {
        self.dense.ids.iter().copied().zip(self.x.iter().copied()).collect()
    }

    fn run(&mut self, cfg: &CheckerConfig) -> Result<(), CheckError> {
        if !(cfg.epsilon > 0.0) {
            return Err(CheckError::InvalidConfig("epsilon must be positive".into()));
        }
        let mut delta = f64::INFINITY;
        while self.iterations < cfg.max_iters {
            delta = self.step();
            if delta < cfg.epsilon {
                return Ok(());
            }
        }
        Err(CheckError::NotConverged {
            iterations: self.iterations,
            delta,
            values: self.value_map(),
        })
    }

    /// Optimal action per non-target state with actions. Among actions within
    /// `tol` of the optimum, prefers those moving closer to the target, then
    /// the lexicographically smallest name.
    fn scheduler(&self, tol: f64) -> Vec<Option<usize>> {
        let d = &self.dense;
        let n = d.n();
        let optimal: Vec<Vec<usize>> = (0..n)
            .map(|s| {
                if d.target[s] {
                    return Vec::new();
                }
                (0..d.choices[s].len())
                    .filter(|&c| (d.q(&self.x, s, c) - self.x[s]).abs() <= tol)
                    .collect()
            })
            .collect();
        // rank: BFS distance to the target through optimal actions
        let mut rank = vec![usize::MAX; n];
        let mut frontier: Vec<usize> = (0..n).filter(|&s| d.target[s]).collect();
        for &s in &frontier {
            rank[s] = 0;
        }
        let mut r = 0;
        while !frontier.is_empty() {
            r += 1;
            let mut next = Vec::new();
            for s in 0..n {
                if rank[s] != usize::MAX {
                    continue;
                }
                let hits = optimal[s].iter().any(|&c| {
                    d.choices[s][c].1.iter().any(|&(t, p)| p > 0.0 && rank[t] == r - 1)
                });
                if hits {
                    rank[s] = r;
                    next.push(s);
                }
            }
            frontier = next;
        }
        (0..n)
            .map(|s| {
                if optimal[s].is_empty() {
                    return None;
                }
                let best_rank = |c: usize| {
                    d.choices[s][c]
                        .1
                        .iter()
                        .filter(|&&(_, p)| p > 0.0)
                        .map(|&(t, _)| rank[t])
                        .min()
                        .unwrap_or(usize::MAX)
                };
                // choices are already sorted by action name
                optimal[s].iter().copied().min_by_key(|&c| (best_rank(c), c))
            })
            .collect()
    }
}

/// Fixpoint values of eventually reaching `query.target`.
pub fn reach_values(
    amdp: &Amdp,
    query: &ReachQuery,
    cfg: &CheckerConfig,
) -> Result<BTreeMap<StateId, f64>, CheckError> {
    let mut vi = ValueIterator::new(amdp, query.direction, &query.target)?;
    vi.run(cfg)?;
    Ok(vi.value_map())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub path: AbstractPath,
    /// Probability of the path under the scheduler-induced chain.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub query: String,
    pub values: BTreeMap<StateId, f64>,
    pub initial_state: StateId,
    pub value: f64,
    pub per_initial: BTreeMap<StateId, f64>,
    pub verdict: Option<Verdict>,
    pub scheduler: BTreeMap<StateId, String>,
    pub witness: Option<Witness>,
    pub iterations: usize,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // min-heap on distance, then on index
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

fn witness(vi: &ValueIterator, sched: &[Option<usize>], start: usize) -> Option<Witness> {
    let d = &vi.dense;
    let n = d.n();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[start] = 0.0;
    heap.push(Entry(0.0, start));
    let mut hit = None;
    while let Some(Entry(du, u)) = heap.pop() {
        if du > dist[u] {
            continue;
        }
        if d.target[u] {
            hit = Some(u);
            break;
        }
        let Some(c) = sched[u] else { continue };
        for &(t, p) in &d.choices[u][c].1 {
            if p <= 0.0 {
                continue;
            }
            let nd = du - p.ln();
            if nd < dist[t] {
                dist[t] = nd;
                prev[t] = Some(u);
                heap.push(Entry(nd, t));
            }
        }
    }
    let end = hit?;
    let mut chain = vec![end];
    while let Some(p) = prev[*chain.last().expect("non-empty")] {
        chain.push(p);
    }
    chain.reverse();
    let mut path = AbstractPath::start(d.ids[chain[0]]);
    for w in chain.windows(2) {
        let c = sched[w[0]].expect("scheduled on path");
        path.push(d.choices[w[0]][c].0.clone(), d.ids[w[1]]);
    }
    Some(Witness {
        path,
        probability: (-dist[end]).exp(),
    })
}

/// Evaluates `query` at the chosen initial state, with verdict and witness.
pub fn check(amdp: &Amdp, query: &ReachQuery, cfg: &CheckerConfig) -> Result<CheckResult, CheckError> {
    let mut vi = ValueIterator::new(amdp, query.direction, &query.target)?;
    vi.run(cfg)?;
    let values = vi.value_map();
    let per_initial: BTreeMap<StateId, f64> =
        amdp.initial_counts().keys().map(|s| (*s, values[s])).collect();
    let initial_state = match cfg.initial {
        InitialMode::Modal => amdp.modal_initial().ok_or(CheckError::NoInitialState)?,
        InitialMode::WorstCase => {
            // least favorable: the largest value against an upper bound or a
            // Pmin query, the smallest otherwise
            let wants_high = match query.threshold {
                Some((Relation::Le | Relation::Lt, _)) => true,
                Some(_) => false,
                None => query.direction == Direction::Min,
            };
            let mut it = per_initial.iter();
            let first = it.next().ok_or(CheckError::NoInitialState)?;
            it.fold(first, |best, cur| {
                let better = if wants_high { cur.1 > best.1 } else { cur.1 < best.1 };
                if better {
                    cur
                } else {
                    best
                }
            })
            .0
            .to_owned()
        }
    };
    let value = values[&initial_state];
    let verdict = query.threshold.map(|(rel, t)| {
        if rel.holds(value, t) {
            Verdict::Satisfied
        } else {
            Verdict::Violated
        }
    });
    let tol = (cfg.epsilon * 100.0).max(1e-12);
    let sched = vi.scheduler(tol);
    let start = vi.dense.ids.iter().position(|s| *s == initial_state).expect("initial is a state");
    let w = witness(&vi, &sched, start);
    let scheduler = sched
        .iter()
        .enumerate()
        .filter_map(|(s, c)| c.map(|c| (vi.dense.ids[s], vi.dense.choices[s][c].0.clone())))
        .collect();
    Ok(CheckResult {
        query: query.to_string(),
        values,
        initial_state,
        value,
        per_initial,
        verdict,
        scheduler,
        witness: w,
        iterations: vi.iterations(),
    })
}
