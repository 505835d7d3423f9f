//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use abstrace::amdp::{terminal_status_rules, Amdp, ExplicitModel};
use abstrace::anomaly::{normal_quantile, prefix_stats, run_loglik, Detector, DetectorConfig};
use abstrace::checker::{check, reach_values, CheckerConfig, Direction, ReachQuery};
use abstrace::harness::generator::{generate_corpus, AnomalyKind, GeneratorConfig};
use abstrace::harness::pipeline::{abstract_runs, score_log, DetectionReport};
use abstrace::refine::{verify_refine_loop, verify_refine_loop_with, IterationAction, LoopResult, RefinementConfig};
use abstrace::store::LinkedStore;
use abstrace::trace::{TerminalStatus, TraceLog, Value};
use abstrace::tree::{
    build_initial_tree, candidate_predicates, entropy, information_gain, Exclusion, LabeledBatch, Predicate,
    PredicateTree, Split, TreeConfig,
};
use abstrace::trie::{AbstractPath, TraceTrie};
use abstrace::StateId;

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed < Duration::from_secs(limit_s), || format!("took {elapsed:.2?}, limit {limit_s}s"))
}

// 1 ---------------------------------------------------------------------------

fn random_state(rng: &mut ChaCha8Rng) -> abstrace::ConcreteState {
    let texts = ["a", "b", "c"];
    let card = rng.gen_range(0..4);
    snapshot(
        &[("ok", Value::Boolean(rng.gen_bool(0.5)))],
        &[
            ("x", Value::Number(rng.gen_range(0..8) as f64 * 0.25)),
            ("n", Value::Integer(rng.gen_range(-3..4))),
            ("t", Value::Text(texts[rng.gen_range(0..3)].into())),
            ("c", Value::Collection(vec![Value::Integer(0); card])),
        ],
    )
}

fn entropy_gain() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = ["read", "write", "exec", "stop"];
    let cfg = TreeConfig::default();
    let mut max_err: f64 = 0.0;
    let mut preds = 0usize;
    for _ in 0..500 {
        let n = rng.gen_range(1..=50);
        let k = rng.gen_range(1..=4);
        let states: Vec<_> = (0..n).map(|_| random_state(&mut rng)).collect();
        let labs: Vec<&str> = (0..n).map(|_| labels[rng.gen_range(0..k)]).collect();
        let items: Vec<_> = states.iter().zip(labs.iter().copied()).collect();
        let batch = LabeledBatch::new(items.clone());
        let counts: Vec<usize> = batch.class_counts().values().copied().collect();
        let h = entropy(&counts).map_err(|e| e.to_string())?;
        max_err = max_err.max((h - brute_entropy(&labs)).abs());
        max_err = max_err.max((batch.entropy().map_err(|e| e.to_string())? - brute_entropy(&labs)).abs());
        let mut cands = candidate_predicates(&batch, &Exclusion::default(), &cfg);
        cands.push(Predicate::ScalarThreshold { var: "x".into(), threshold: 10.0 });
        cands.push(Predicate::StructCardThreshold { var: "c".into(), threshold: 1 });
        for p in &cands {
            let g = information_gain(&batch, p).map_err(|e| e.to_string())?;
            max_err = max_err.max((g - brute_gain(&items, p)).abs());
            preds += 1;
        }
    }
    ensure(max_err <= 1e-9, || format!("max abs error {max_err:e}"))?;
    within(t0.elapsed(), 5)?;
    Ok(format!("500 batches, {preds} predicates, max err {max_err:.1e}, {:.2?}", t0.elapsed()))
}

// 2 ---------------------------------------------------------------------------

fn random_mdp(rng: &mut ChaCha8Rng) -> (Amdp, BTreeSet<StateId>) {
    let n = rng.gen_range(1..=6u64);
    let actions = ["a", "b", "c"];
    let mut m = Amdp::new();
    for s in 0..n {
        m.add_state(StateId(s));
        if rng.gen_bool(0.2) {
            continue;
        }
        let k = rng.gen_range(1..=3);
        for a in &actions[..k] {
            for t in 0..n {
                if rng.gen_bool(0.5) {
                    for _ in 0..rng.gen_range(1..=4) {
                        m.ingest(StateId(s), a, StateId(t));
                    }
                }
            }
            if m.count2(StateId(s), a) == 0 {
                m.ingest(StateId(s), a, StateId(rng.gen_range(0..n)));
            }
        }
    }
    let target: BTreeSet<StateId> = (0..n).filter(|_| rng.gen_bool(0.3)).map(StateId).collect();
    m.set_label("goal", target.clone());
    (m, target)
}

fn reachability() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = CheckerConfig::default();
    let mut max_err: f64 = 0.0;
    for _ in 0..200 {
        let (m, target) = random_mdp(&mut rng);
        let (hi, lo) = enumerate_reach(&m, &target);
        for (dir, oracle) in [(Direction::Max, &hi), (Direction::Min, &lo)] {
            let got = reach_values(&m, &ReachQuery::new(dir, "goal"), &cfg).map_err(|e| e.to_string())?;
            for (s, v) in oracle {
                max_err = max_err.max((got[s] - v).abs());
            }
        }
    }
    ensure(max_err <= 1e-6, || format!("max abs error {max_err:e}"))?;
    within(t0.elapsed(), 30)?;
    Ok(format!("200 MDPs, max err {max_err:.1e}, {:.2?}", t0.elapsed()))
}

// 3 ---------------------------------------------------------------------------

fn random_path(rng: &mut ChaCha8Rng, max_len: usize) -> AbstractPath {
    let acts = ["a", "b"];
    let mut p = AbstractPath::start(StateId(rng.gen_range(0..3)));
    for _ in 0..rng.gen_range(0..=max_len) {
        p.push(acts[rng.gen_range(0..2)], StateId(rng.gen_range(0..3)));
    }
    p
}

fn mutate(rng: &mut ChaCha8Rng, p: &AbstractPath) -> AbstractPath {
    let keep = rng.gen_range(0..=p.len());
    let mut q = p.prefix(keep);
    if rng.gen_bool(0.5) {
        q.push(["a", "b", "z"][rng.gen_range(0..3)], StateId(rng.gen_range(0..4)));
    }
    q
}

fn trie_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut queries = 0usize;
    for _ in 0..100 {
        let corpus: Vec<AbstractPath> = (0..rng.gen_range(1..=200)).map(|_| random_path(&mut rng, 30)).collect();
        let mut trie = TraceTrie::new();
        for p in &corpus {
            trie.insert(p, &[]);
        }
        let mut qs: Vec<AbstractPath> = (0..100).map(|_| random_path(&mut rng, 6)).collect();
        for _ in 0..200 {
            let base = corpus.choose(&mut rng).unwrap();
            qs.push(mutate(&mut rng, base));
        }
        for q in &qs {
            ensure(trie.supports(q) == scan_supports(&corpus, q), || format!("supports disagrees on {q:?}"))?;
            let (got, want) = (trie.earliest_divergence(q), scan_divergence(&corpus, q));
            ensure(got == want, || format!("divergence {got:?} vs {want:?} on {q:?}"))?;
            queries += 1;
        }
    }
    within(t0.elapsed(), 10)?;
    Ok(format!("100 corpora, {queries} queries, {:.2?}", t0.elapsed()))
}

// 4 ---------------------------------------------------------------------------

fn random_log(rng: &mut ChaCha8Rng) -> TraceLog {
    let mut log = TraceLog::new();
    let acts = ["read", "write", "exec"];
    for i in 0..rng.gen_range(5..25) {
        let len = rng.gen_range(1..12);
        let mut states = vec![random_state(rng)];
        let mut actions = Vec::new();
        for _ in 0..len {
            states.push(random_state(rng));
            actions.push(acts[rng.gen_range(0..3)]);
        }
        let status = if rng.gen_bool(0.5) { TerminalStatus::Success } else { TerminalStatus::Failure };
        log.push(chain(format!("r{i}"), &states, &actions, status)).unwrap();
    }
    log
}

fn structure_invariants() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = TreeConfig::default();
    let mut splits = 0usize;
    for c in 0..20 {
        let log = Arc::new(random_log(&mut rng));
        let pool = candidate_predicates(&LabeledBatch::from_log(&log), &Exclusion::default(), &cfg);
        let mut store = LinkedStore::build(log.clone(), PredicateTree::single_leaf(), terminal_status_rules())
            .map_err(|e| e.to_string())?;
        let v = store.check_invariants();
        ensure(v.is_empty(), || format!("corpus {c} after build: {v:?}"))?;
        for _ in 0..50 {
            let leaves: Vec<StateId> = store.tree().leaf_states().into_iter().collect();
            let leaf = *leaves.choose(&mut rng).unwrap();
            let predicate = pool.choose(&mut rng).unwrap().clone();
            let (tree, children) = store.tree().with_split(leaf, predicate.clone()).map_err(|e| e.to_string())?;
            let split = Split {
                tree,
                parent: leaf,
                children,
                predicate,
                gain: 0.0,
                base_revision: store.tree().revision(),
            };
            store.apply_split(&split).map_err(|e| e.to_string())?;
            splits += 1;
            let v = store.check_invariants();
            ensure(v.is_empty(), || format!("corpus {c} split {splits}: {v:?}"))?;
            let fresh = LinkedStore::build(log.clone(), store.tree().clone(), terminal_status_rules())
                .map_err(|e| e.to_string())?;
            ensure(store.same_structure(&fresh), || format!("corpus {c}: incremental differs from rebuild"))?;
        }
    }
    Ok(format!("20 corpora, {splits} splits, {:.2?}", t0.elapsed()))
}

// 5 ---------------------------------------------------------------------------

fn likelihood_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = Amdp::new();
    let acts = ["a", "b"];
    let mut runs = Vec::new();
    for _ in 0..40 {
        let mut p = AbstractPath::start(StateId(0));
        for _ in 0..rng.gen_range(1..15) {
            let s = *p.states().last().unwrap();
            let a = acts[rng.gen_range(0..2)];
            let t = StateId(rng.gen_range(0..4));
            m.ingest(s, a, t);
            p.push(a, t);
        }
        runs.push(p);
    }
    let manual = |p: &AbstractPath, k: usize| -> f64 {
        p.steps().take(k).map(|(s, a, t)| (m.count3(s, a, t) as f64 / m.count2(s, a) as f64).ln()).sum()
    };
    for p in &runs {
        let whole = run_loglik(&m, "r", p).loglik;
        ensure((whole - manual(p, p.len())).abs() <= 1e-9, || "run log-likelihood differs from manual sum".into())?;
        // additivity over any cut point
        for cut in 0..=p.len() {
            let head = run_loglik(&m, "h", &p.prefix(cut)).loglik;
            let tail = AbstractPath::new(p.states()[cut..].to_vec(), p.actions()[cut..].to_vec()).unwrap();
            let sum = head + run_loglik(&m, "t", &tail).loglik;
            ensure((sum - whole).abs() <= 1e-9, || format!("additivity fails at cut {cut}"))?;
        }
    }
    let mut unseen = runs[0].clone();
    unseen.push("never", StateId(0));
    ensure(run_loglik(&m, "u", &unseen).loglik == f64::NEG_INFINITY, || "unseen transition is not -inf".into())?;

    let ks = [1, 3, 5, 10];
    let stats = prefix_stats(&runs, &m, &ks);
    for k in ks {
        let vals: Vec<f64> = runs.iter().filter(|p| p.len() >= k).map(|p| manual(p, k)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let c = &stats[&k];
        ensure(c.n_runs == vals.len(), || format!("k={k}: {} runs vs {}", c.n_runs, vals.len()))?;
        let s = c.stats.as_ref().ok_or(format!("k={k} unarmed"))?;
        ensure((s.mean - mean).abs() <= 1e-9 && (s.sd - sd).abs() <= 1e-9, || {
            format!("k={k}: ({}, {}) vs ({mean}, {sd})", s.mean, s.sd)
        })?;
    }
    let mut max_q: f64 = 0.0;
    for p in [0.9, 0.95, 0.975, 0.99] {
        let z = normal_quantile(p).map_err(|e| e.to_string())?;
        max_q = max_q.max((z - bisect_quantile(p)).abs());
    }
    ensure(max_q <= 1e-5, || format!("quantile error {max_q:e}"))?;
    Ok(format!("{} runs, quantile err {max_q:.1e}", runs.len()))
}

// 6 and 7 -------------------------------------------------------------------

fn detection() -> Outcome {
    let t0 = Instant::now();
    let corpus = generate_corpus(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let (mut train, mut held) = (TraceLog::new(), TraceLog::new());
    for (i, t) in corpus.baseline.traces().iter().enumerate() {
        let dst = if i < 800 { &mut train } else { &mut held };
        dst.push(t.clone()).map_err(|e| e.to_string())?;
    }
    let train = Arc::new(train);
    let tree = build_initial_tree(&train, &TreeConfig::default()).map_err(|e| e.to_string())?;
    let store = LinkedStore::build(train.clone(), tree, terminal_status_rules()).map_err(|e| e.to_string())?;
    let runs = abstract_runs(&train, store.tree()).map_err(|e| e.to_string())?;
    let detector = Detector::train(store.amdp(), &runs, DetectorConfig::default()).map_err(|e| e.to_string())?;
    let mut scores = score_log(&store, &detector, &held).map_err(|e| e.to_string())?;
    scores.extend(score_log(&store, &detector, &corpus.anomalous).map_err(|e| e.to_string())?);
    let report = DetectionReport::evaluate(&scores, &corpus.truth);
    let elapsed = t0.elapsed();

    let fpr = report.fpr.unwrap_or(1.0);
    let long = report.kind_recall(AnomalyKind::TooLong).unwrap_or(0.0);
    let short = report.kind_recall(AnomalyKind::TooShort).unwrap_or(0.0);
    let detail = format!(
        "{} leaves, recall too_long {long:.3} too_short {short:.3}, fpr {fpr:.3} ({}/{}), {elapsed:.2?}",
        store.tree().num_leaves(),
        report.fp,
        report.fp + report.tn
    );
    ensure(report.fp + report.tn == 200, || format!("expected 200 held-out normals: {detail}"))?;
    ensure(long >= 0.90 && short >= 0.90 && fpr <= 0.10, || detail.clone())?;
    within(elapsed, 60).map_err(|e| format!("{e}; {detail}"))?;
    Ok(detail)
}

fn sandwich() -> Outcome {
    let corpus = generate_corpus(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let mut log = corpus.baseline;
    for t in corpus.anomalous.traces() {
        log.push(t.clone()).map_err(|e| e.to_string())?;
    }
    let log = Arc::new(log);
    let tree = build_initial_tree(&log, &TreeConfig::default()).map_err(|e| e.to_string())?;
    let store = LinkedStore::build(log.clone(), tree, terminal_status_rules()).map_err(|e| e.to_string())?;
    let s0 = store.amdp().modal_initial().ok_or("no initial state")?;
    let cfg = CheckerConfig::default();
    let hi = reach_values(store.amdp(), &ReachQuery::new(Direction::Max, "success"), &cfg).map_err(|e| e.to_string())?[&s0];
    let lo = reach_values(store.amdp(), &ReachQuery::new(Direction::Min, "success"), &cfg).map_err(|e| e.to_string())?[&s0];
    let (mut from_s0, mut ok) = (0usize, 0usize);
    for t in log.traces() {
        if store.tree().abstract_state(t.state(0).unwrap()).map_err(|e| e.to_string())? == s0 {
            from_s0 += 1;
            ok += (t.terminal_status() == TerminalStatus::Success) as usize;
        }
    }
    let frac = ok as f64 / from_s0 as f64;
    let detail = format!("Pmin {lo:.4} <= {frac:.4} <= Pmax {hi:.4} over {from_s0} runs");
    ensure(frac >= lo - 0.02 && frac <= hi + 0.02, || detail.clone())?;
    Ok(detail)
}

// 8 ---------------------------------------------------------------------------

fn real_counterexample() -> Result<String, String> {
    let init = snapshot(&[("done", Value::Boolean(false))], &[("n", Value::Integer(0))]);
    let good = snapshot(&[("done", Value::Boolean(true))], &[("n", Value::Integer(1))]);
    let bad = snapshot(&[("done", Value::Boolean(false))], &[("n", Value::Integer(1))]);
    let mut log = TraceLog::new();
    for i in 0..5 {
        log.push(chain(format!("ok{i}"), &[init.clone(), good.clone()], &["run"], TerminalStatus::Success)).unwrap();
    }
    log.push(chain("broken", &[init, bad], &["run"], TerminalStatus::Failure)).unwrap();
    let log = Arc::new(log);
    // finals split by outcome, so the failing state is its own vertex
    let (tree, (_, fin)) = PredicateTree::single_leaf()
        .with_split(StateId(0), Predicate::ScalarThreshold { var: "n".into(), threshold: 0.5 })
        .unwrap();
    let (tree, _) = tree.with_split(fin, Predicate::BooleanEq { var: "done".into(), expected: true }).unwrap();
    let property: ReachQuery = r#"Pmin<=0 [F "failure"]"#.parse().map_err(|e| format!("{e}"))?;
    let mut cfg = RefinementConfig::new(property);
    cfg.tree.min_leaf_size = 1;
    let out = verify_refine_loop(log.clone(), tree, terminal_status_rules(), &cfg).map_err(|e| e.to_string())?;
    let LoopResult::RealCounterexample { refs, .. } = &out.result else {
        return Err(format!("expected a real counterexample, got {:?}", out.result));
    };
    let ids: BTreeSet<&str> = refs.iter().map(|r| log.traces()[r.trace].trace_id()).collect();
    ensure(ids.contains("broken"), || format!("counterexample refs {ids:?}"))?;
    Ok(format!("refs {ids:?} after {} iterations", out.iterations.len()))
}

fn regime_merge() -> Result<String, String> {
    // two regimes share every state except a hidden flag; only the flag predicts the action
    let mut log = TraceLog::new();
    let st = |n: i64, fast: bool, ok: bool, bad: bool| {
        snapshot(
            &[("ok", Value::Boolean(ok)), ("bad", Value::Boolean(bad))],
            &[("n", Value::Integer(n)), ("fast", Value::Boolean(fast))],
        )
    };
    for i in 0..8 {
        let a = [st(0, true, false, false), st(1, true, false, false), st(2, true, true, false)];
        log.push(chain(format!("fast{i}"), &a, &["plan", "ship"], TerminalStatus::Success)).unwrap();
        let b = [st(0, false, false, false), st(1, false, false, false), st(2, false, false, true)];
        log.push(chain(format!("slow{i}"), &b, &["plan", "abort"], TerminalStatus::Failure)).unwrap();
    }
    let log = Arc::new(log);
    let mut cfg = RefinementConfig::new(r#"Pmax<=0 [F "failure"]"#.parse().map_err(|e| format!("{e}"))?);
    cfg.tree.min_leaf_size = 1;
    cfg.max_iterations = 10;
    let mut broken = Vec::new();
    let mut splits = 0;
    let mut rounds = 0;
    let out = verify_refine_loop_with(log.clone(), PredicateTree::single_leaf(), terminal_status_rules(), &cfg, |s, r| {
        rounds += 1;
        splits += (r.action == IterationAction::Split) as usize;
        let v = s.check_invariants();
        if !v.is_empty() {
            broken.push((r.iter, v));
        }
    })
    .map_err(|e| e.to_string())?;
    ensure(broken.is_empty(), || format!("invariant violations {broken:?}"))?;
    ensure(splits >= 1, || format!("no split performed; result {:?}", out.result))?;
    ensure(rounds <= cfg.max_iterations, || format!("{rounds} iterations exceed the bound"))?;
    let name = match &out.result {
        LoopResult::Verified => "verified",
        LoopResult::RealCounterexample { witness, refs } => {
            for r in refs {
                let t = &log.traces()[r.trace];
                let (p, _) = AbstractPath::of_trace(t, r.trace, out.store.tree()).map_err(|e| e.to_string())?;
                ensure(t.terminal_status() == TerminalStatus::Failure && &p == witness, || {
                    format!("{} does not realize the witness", t.trace_id())
                })?;
            }
            "real counterexample"
        }
        LoopResult::Exhausted { .. } => "exhausted",
    };
    Ok(format!("{splits} splits in {rounds} iterations, {name}, {} leaves", out.store.tree().num_leaves()))
}

fn refinement() -> Outcome {
    let a = real_counterexample()?;
    let b = regime_merge()?;
    Ok(format!("{a}; {b}"))
}

// 9 ---------------------------------------------------------------------------

fn export_round_trip() -> Outcome {
    let corpus = generate_corpus(&GeneratorConfig { n_baseline: 200, n_anomalous: 50, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let log = Arc::new(corpus.baseline);
    let tree = build_initial_tree(&log, &TreeConfig::default()).map_err(|e| e.to_string())?;
    let store = LinkedStore::build(log.clone(), tree.clone(), terminal_status_rules()).map_err(|e| e.to_string())?;
    let m = store.amdp();
    let (tra, lab) = m.export_explicit();
    let again = LinkedStore::build(log, tree, terminal_status_rules()).map_err(|e| e.to_string())?;
    ensure(again.amdp().export_explicit() == (tra.clone(), lab.clone()), || "export is not byte-deterministic".into())?;

    let parsed = ExplicitModel::parse(&tra, &lab).map_err(|e| e.to_string())?;
    let order = m.dense_order();
    ensure(parsed.num_states == order.len(), || "state count differs".into())?;
    let mut seen = 0usize;
    for (src, _, dst, p, action) in &parsed.transitions {
        let (s, t) = (order[*src], order[*dst]);
        match action {
            Some(a) => {
                let want = m.probability(s, a, t).map_err(|e| e.to_string())?;
                ensure(*p == want, || format!("{s} -{a}-> {t}: {p} vs {want}"))?;
                seen += 1;
            }
            None => ensure(m.is_terminal(s) && s == t && *p == 1.0, || format!("bad self-loop at {s}"))?,
        }
    }
    let expected: usize = order.iter().map(|&s| m.enabled(s).map(|a| m.successors(s, a).len()).sum::<usize>()).sum();
    ensure(seen == expected, || format!("{seen} transitions re-parsed, model has {expected}"))?;
    for (name, states) in m.labels() {
        let back: BTreeSet<StateId> =
            parsed.labels.iter().filter(|(_, ls)| ls.contains(name)).map(|(i, _)| order[*i]).collect();
        ensure(&back == states, || format!("label {name} differs"))?;
    }
    let init: BTreeMap<StateId, ()> =
        parsed.labels.iter().filter(|(_, ls)| ls.iter().any(|l| l == "init")).map(|(i, _)| (order[*i], ())).collect();
    ensure(init.keys().eq(m.initial_counts().keys()), || "init label differs".into())?;
    let result = check(m, &ReachQuery::new(Direction::Max, "success"), &CheckerConfig::default());
    ensure(result.is_ok(), || "exported model does not check".into())?;
    Ok(format!("{} states, {seen} transitions", parsed.num_states))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("entropy and information gain vs brute force", entropy_gain),
        ("Pmax/Pmin vs scheduler enumeration", reachability),
        ("trie supports/divergence vs linear scan", trie_oracle),
        ("linked-store invariants and rebuild equality", structure_invariants),
        ("likelihood additivity, prefixes, quantile", likelihood_math),
        ("synthetic corpus detection", detection),
        ("empirical success within Pmin/Pmax", sandwich),
        ("refinement loop", refinement),
        ("explicit export round trip", export_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1)
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
