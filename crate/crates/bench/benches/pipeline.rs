use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use abstrace::amdp::terminal_status_rules;
use abstrace::checker::{check, CheckerConfig, ReachQuery};
use abstrace::harness::generator::{generate_corpus, GeneratorConfig};
use abstrace::harness::pipeline::{abstract_runs, score_log, train_detector};
use abstrace::store::LinkedStore;
use abstrace::tree::{build_initial_tree, TreeConfig};
use abstrace::DetectorConfig;

fn stages(c: &mut Criterion) {
    let corpus = generate_corpus(&GeneratorConfig { n_baseline: 300, n_anomalous: 100, ..GeneratorConfig::default() })
        .expect("corpus");
    let log = Arc::new(corpus.baseline);
    let tcfg = TreeConfig::default();
    let tree = build_initial_tree(&log, &tcfg).expect("tree");
    let store = LinkedStore::build(log.clone(), tree.clone(), terminal_status_rules()).expect("store");
    let detector = train_detector(&store, DetectorConfig::default()).expect("detector");
    let query: ReachQuery = r#"Pmax=? [F "success"]"#.parse().unwrap();
    let ccfg = CheckerConfig::default();

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("learn_tree", |b| b.iter(|| build_initial_tree(black_box(&log), &tcfg).unwrap()));
    g.bench_function("build_store", |b| {
        b.iter(|| LinkedStore::build(log.clone(), tree.clone(), terminal_status_rules()).unwrap())
    });
    g.bench_function("abstract_runs", |b| b.iter(|| abstract_runs(black_box(&log), &tree).unwrap()));
    g.bench_function("check_reach", |b| b.iter(|| check(black_box(store.amdp()), &query, &ccfg).unwrap()));
    g.bench_function("score_anomalous", |b| {
        b.iter(|| score_log(&store, &detector, black_box(&corpus.anomalous)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
