//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use abstrace::amdp::Amdp;
use abstrace::trace::{ActionSymbol, ConcreteState, TerminalStatus, Trace, Transition, Value};
use abstrace::tree::Predicate;
use abstrace::trie::AbstractPath;
use abstrace::StateId;

// ---- entropy / gain -------------------------------------------------------

pub fn brute_entropy(labels: &[&str]) -> f64 {
    let n = labels.len() as f64;
    let mut distinct: Vec<&str> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    let mut h = 0.0;
    for d in distinct {
        let p = labels.iter().filter(|l| **l == d).count() as f64 / n;
        h -= p * p.log2();
    }
    h
}

/// Predicate truth straight from the variable value, without the library's evaluator.
pub fn brute_eval(p: &Predicate, s: &ConcreteState) -> bool {
    match (p, s.get(p.var()).expect("variable present")) {
        (Predicate::ScalarThreshold { threshold, .. }, Value::Number(x)) => *x > *threshold,
        (Predicate::ScalarThreshold { threshold, .. }, Value::Integer(i)) => (*i as f64) > *threshold,
        (Predicate::BooleanEq { expected, .. }, Value::Boolean(b)) => b == expected,
        (Predicate::TextEq { expected, .. }, Value::Text(t)) => t == expected,
        (Predicate::StructEmpty { .. }, Value::Collection(c)) => c.is_empty(),
        (Predicate::StructCardThreshold { threshold, .. }, Value::Collection(c)) => c.len() as u64 > *threshold,
        (p, v) => panic!("{p:?} does not apply to {v:?}"),
    }
}

pub fn brute_gain(items: &[(&ConcreteState, &str)], p: &Predicate) -> f64 {
    let all: Vec<&str> = items.iter().map(|(_, l)| *l).collect();
    let yes: Vec<&str> = items.iter().filter(|(s, _)| brute_eval(p, s)).map(|(_, l)| *l).collect();
    let no: Vec<&str> = items.iter().filter(|(s, _)| !brute_eval(p, s)).map(|(_, l)| *l).collect();
    let n = all.len() as f64;
    let part = |xs: &[&str]| if xs.is_empty() { 0.0 } else { xs.len() as f64 / n * brute_entropy(xs) };
    brute_entropy(&all) - part(&yes) - part(&no)
}

// ---- reachability by scheduler enumeration --------------------------------

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-12, "singular system");
        for row in 0..n {
            if row != col {
                let f = a[row][col] / d;
                if f != 0.0 {
                    for k in col..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

/// Reachability probabilities of the Markov chain `p` (row per state).
fn chain_reach(p: &[Vec<f64>], target: &[bool]) -> Vec<f64> {
    let n = p.len();
    // states that reach the target with positive probability
    let mut can = target.to_vec();
    loop {
        let mut changed = false;
        for i in 0..n {
            if !can[i] && (0..n).any(|j| p[i][j] > 0.0 && can[j]) {
                can[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let unknown: Vec<usize> = (0..n).filter(|&i| can[i] && !target[i]).collect();
    let mut x: Vec<f64> = target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    if unknown.is_empty() {
        return x;
    }
    let a = unknown
        .iter()
        .map(|&i| unknown.iter().map(|&j| if i == j { 1.0 } else { 0.0 } - p[i][j]).collect())
        .collect();
    let b = unknown.iter().map(|&i| (0..n).filter(|&j| target[j]).map(|j| p[i][j]).sum()).collect();
    for (k, v) in unknown.iter().zip(solve(a, b)) {
        x[*k] = v;
    }
    x
}

/// `(Pmax, Pmin)` of eventually reaching `target` over every memoryless
/// deterministic scheduler.
pub fn enumerate_reach(amdp: &Amdp, target: &BTreeSet<StateId>) -> (BTreeMap<StateId, f64>, BTreeMap<StateId, f64>) {
    let ids: Vec<StateId> = amdp.states().iter().copied().collect();
    let index: BTreeMap<StateId, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let n = ids.len();
    let choices: Vec<Vec<Vec<f64>>> = ids
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let acts: Vec<&str> = amdp.enabled(s).collect();
            if acts.is_empty() {
                let mut row = vec![0.0; n];
                row[i] = 1.0;
                return vec![row];
            }
            acts.iter()
                .map(|a| {
                    let counts = amdp.successor_counts(s, a).unwrap();
                    let total: u64 = counts.values().sum();
                    let mut row = vec![0.0; n];
                    for (t, c) in counts {
                        row[index[t]] += *c as f64 / total as f64;
                    }
                    row
                })
                .collect()
        })
        .collect();
    let tgt: Vec<bool> = ids.iter().map(|s| target.contains(s)).collect();
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut lo = vec![f64::INFINITY; n];
    let mut pick = vec![0usize; n];
    loop {
        let p: Vec<Vec<f64>> = (0..n).map(|i| choices[i][pick[i]].clone()).collect();
        for (i, v) in chain_reach(&p, &tgt).into_iter().enumerate() {
            hi[i] = hi[i].max(v);
            lo[i] = lo[i].min(v);
        }
        // odometer over scheduler choices
        let mut i = 0;
        while i < n {
            pick[i] += 1;
            if pick[i] < choices[i].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
    }
    let map = |v: Vec<f64>| ids.iter().copied().zip(v).collect();
    (map(hi), map(lo))
}

// ---- trie by linear scan --------------------------------------------------

fn common_steps(a: &AbstractPath, b: &AbstractPath) -> Option<usize> {
    if a.states().first()? != b.states().first()? {
        return None;
    }
    let mut k = 0;
    while k < a.len() && k < b.len() && a.actions()[k] == b.actions()[k] && a.states()[k + 1] == b.states()[k + 1] {
        k += 1;
    }
    Some(k)
}

pub fn scan_supports(corpus: &[AbstractPath], q: &AbstractPath) -> bool {
    corpus.iter().any(|p| common_steps(p, q) == Some(q.len()))
}

pub fn scan_divergence(corpus: &[AbstractPath], q: &AbstractPath) -> Option<usize> {
    if scan_supports(corpus, q) {
        return None;
    }
    Some(corpus.iter().filter_map(|p| common_steps(p, q)).max().unwrap_or(0))
}

// ---- normal quantile by bisection on an erf series -------------------------

/// `erf` from its Maclaurin series; accurate for |x| up to about 5.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x2 / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-17 * sum.abs().max(1e-300) && n > 5.0 {
            break;
        }
        if n > 400.0 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn bisect_quantile(p: f64) -> f64 {
    let cdf = |z: f64| 0.5 * (1.0 + erf_series(z / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (-8.0_f64, 8.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid
        } else {
            hi = mid
        }
    }
    0.5 * (lo + hi)
}

// ---- small trace builders --------------------------------------------------

pub fn snapshot(check: &[(&str, Value)], state: &[(&str, Value)]) -> ConcreteState {
    let m = |xs: &[(&str, Value)]| xs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    ConcreteState::new(BTreeMap::new(), m(check), m(state)).unwrap()
}

pub fn chain(id: impl Into<String>, states: &[ConcreteState], actions: &[&str], status: TerminalStatus) -> Trace {
    assert_eq!(states.len(), actions.len() + 1);
    let steps = states
        .windows(2)
        .zip(actions)
        .map(|(w, a)| Transition { pre: w[0].clone(), action: ActionSymbol::new(*a), post: w[1].clone() })
        .collect();
    Trace::new(id, Some(states[0].clone()), steps, status).unwrap()
}
