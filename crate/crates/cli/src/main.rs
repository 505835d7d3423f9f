use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use abstrace::amdp::terminal_status_rules;
use abstrace::anomaly::RunMonitor;
use abstrace::checker::InitialMode;
use abstrace::harness::generator::{generate_corpus, GeneratorConfig};
use abstrace::harness::pipeline::{read_truth, score_log, train_detector, DetectionReport};
use abstrace::refine::verify_refine_loop_with;
use abstrace::store::sha256_hex;
use abstrace::trace::{StreamItem, StreamSegmenter};
use abstrace::tree::build_initial_tree;
use abstrace::{
    check, CheckerConfig, DetectorConfig, DetectorMode, LabelRule, LinkedStore, LoopResult, PredicateTree,
    ReachQuery, RefinementConfig, RunReport, StateId, StoreManifest, TraceLog, TreeConfig, Verdict,
};

#[derive(Parser)]
#[command(name = "abstrace", version, about = "Abstract agent traces, check them, score them")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct TreeFlags {
    /// Minimum information gain for a split.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    max_leaves: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
}

impl TreeFlags {
    fn config(&self) -> TreeConfig {
        let d = TreeConfig::default();
        TreeConfig {
            min_gain: self.gamma.unwrap_or(d.min_gain),
            max_depth: self.max_depth.unwrap_or(d.max_depth),
            max_leaves: self.max_leaves.unwrap_or(d.max_leaves),
            min_leaf_size: self.min_leaf.unwrap_or(d.min_leaf_size),
            ..d
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Normal,
    Empirical,
}

#[derive(clap::Args, Clone)]
struct DetectorFlags {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Comma-separated prefix lengths, e.g. 10,20,30.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = Mode::Normal)]
    mode: Mode,
}

impl DetectorFlags {
    fn config(&self) -> DetectorConfig {
        DetectorConfig {
            alpha: self.alpha,
            checkpoints: self.checkpoints.clone(),
            mode: match self.mode {
                Mode::Normal => DetectorMode::Normal,
                Mode::Empirical => DetectorMode::Empirical,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Initial {
    Modal,
    WorstCase,
}

#[derive(clap::Args, Clone)]
struct CheckFlags {
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 100_000)]
    max_vi_iters: usize,
    #[arg(long, value_enum, default_value_t = Initial::Modal)]
    initial: Initial,
}

impl CheckFlags {
    fn config(&self) -> CheckerConfig {
        CheckerConfig {
            epsilon: self.epsilon,
            max_iters: self.max_vi_iters,
            initial: match self.initial {
                Initial::Modal => InitialMode::Modal,
                Initial::WorstCase => InitialMode::WorstCase,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    PrismExplicit,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic baseline/anomalous corpus.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a predicate tree from a log.
    Learn {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tree: TreeFlags,
    },
    /// Build the linked store (tree, MDP, trie) and its explicit export.
    Build {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        /// JSON array of label rules; terminal-status rules by default.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a reachability property.
    Check {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        prop: String,
        #[command(flatten)]
        checker: CheckFlags,
    },
    /// Score every run of a log against the store's baseline.
    Score {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        detector: DetectorFlags,
    },
    /// Follow a growing log and report checkpoint warnings as runs progress.
    Monitor {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        follow: PathBuf,
        /// Stop after this many seconds without new data.
        #[arg(long)]
        idle_exit: Option<f64>,
        #[command(flatten)]
        detector: DetectorFlags,
    },
    /// Run the check/refine loop on a thresholded property.
    Refine {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        prop: String,
        #[arg(long, default_value_t = 20)]
        max_iters: usize,
        /// Save the refined store here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tree: TreeFlags,
        #[command(flatten)]
        checker: CheckFlags,
    },
    /// Write the model in a model-checker input format.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::PrismExplicit)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare score verdicts with ground truth.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// A failed command: exit code plus a machine-readable reason.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

fn data(kind: &'static str) -> impl FnOnce(String) -> Failure {
    move |message| Failure { code: 3, kind, message }
}

macro_rules! data_err {
    ($kind:literal) => {
        |e| data($kind)(e.to_string())
    };
}

type Outcome = Result<u8, Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data("io")(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data("config")(format!("{}: {e}", path.display())))
}

fn read_log(path: &Path) -> Result<(TraceLog, Vec<u8>), Failure> {
    let bytes = fs::read(path).map_err(|e| data("io")(format!("{}: {e}", path.display())))?;
    let log = TraceLog::from_reader(bytes.as_slice()).map_err(data_err!("trace"))?;
    Ok((log, bytes))
}

fn open_store(dir: &Path) -> Result<(LinkedStore, StoreManifest), Failure> {
    LinkedStore::open(dir).map_err(data_err!("store"))
}

fn parse_prop(s: &str) -> Result<ReachQuery, Failure> {
    s.parse().map_err(|e: abstrace::CheckError| Failure { code: 2, kind: "usage", message: e.to_string() })
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data_err!("io"))?;
    }
    fs::write(path, contents).map_err(|e| data("io")(format!("{}: {e}", path.display())))
}

fn cmd_gen(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut cfg: GeneratorConfig = match config {
        Some(p) => read_json(&p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg).map_err(data_err!("config"))?;
    corpus.write_to(out).map_err(data_err!("io"))?;
    print_json(&json!({
        "baseline": corpus.baseline.len(),
        "anomalous": corpus.anomalous.len(),
        "out": out,
    }));
    Ok(0)
}

fn cmd_learn(log: &Path, out: &Path, flags: &TreeFlags) -> Outcome {
    let (log, _) = read_log(log)?;
    let cfg = flags.config();
    let tree = build_initial_tree(&log, &cfg).map_err(data_err!("tree"))?;
    write_file(out, tree.to_json_string())?;
    print_json(&json!({ "leaves": tree.num_leaves(), "out": out }));
    Ok(0)
}

fn cmd_build(log_path: &Path, tree_path: &Path, rules: Option<PathBuf>, out: &Path) -> Outcome {
    let (log, bytes) = read_log(log_path)?;
    let tree_text = fs::read_to_string(tree_path).map_err(data_err!("io"))?;
    let tree = PredicateTree::from_json_str(&tree_text).map_err(data_err!("tree"))?;
    let rules: Vec<LabelRule> = match rules {
        Some(p) => read_json(&p)?,
        None => terminal_status_rules(),
    };
    let store = LinkedStore::build(Arc::new(log), tree, rules.clone()).map_err(data_err!("store"))?;
    let log_path = fs::canonicalize(log_path).map_err(data_err!("io"))?;
    let manifest = StoreManifest {
        log_path,
        log_sha256: sha256_hex(&bytes),
        label_rules: rules,
        config_digest: sha256_hex(tree_text.as_bytes()),
    };
    store.save(out, &manifest).map_err(data_err!("io"))?;
    let mixed: usize = store.label_report().mixed.values().map(|m| m.len()).sum();
    print_json(&json!({
        "states": store.amdp().states().len(),
        "transitions": store.amdp().num_transitions(),
        "trie_nodes": store.trie().len(),
        "mixed_label_states": mixed,
        "out": out,
    }));
    Ok(0)
}

fn cmd_check(store: &Path, prop: &str, flags: &CheckFlags) -> Outcome {
    let q = parse_prop(prop)?;
    let (store, _) = open_store(store)?;
    let res = check(store.amdp(), &q, &flags.config()).map_err(data_err!("check"))?;
    print_json(&res);
    Ok(if res.verdict == Some(Verdict::Violated) { 1 } else { 0 })
}

fn cmd_score(store: &Path, log: &Path, flags: &DetectorFlags) -> Outcome {
    let (store, _) = open_store(store)?;
    let detector = train_detector(&store, flags.config()).map_err(data_err!("detector"))?;
    let (log, _) = read_log(log)?;
    let reports = score_log(&store, &detector, &log).map_err(data_err!("score"))?;
    let mut out = io::stdout().lock();
    for r in &reports {
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("serializable"));
    }
    Ok(0)
}

/// Lines of a file that may still be growing; partial lines are held back.
fn follow_lines(path: PathBuf, idle: Option<Duration>, tx: mpsc::SyncSender<io::Result<String>>) {
    let mut reader = loop {
        match File::open(&path) {
            Ok(f) => break BufReader::new(f),
            Err(e) if e.kind() == io::ErrorKind::NotFound => thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    };
    let mut pending = String::new();
    let mut last_data = Instant::now();
    loop {
        let mut buf = String::new();
        match reader.read_line(&mut buf) {
            Ok(0) => {
                if idle.is_some_and(|d| last_data.elapsed() >= d) {
                    if !pending.is_empty() {
                        let _ = tx.send(Ok(std::mem::take(&mut pending)));
                    }
                    return;
                }
                thread::sleep(Duration::from_millis(50));
            }
            Ok(_) => {
                last_data = Instant::now();
                pending.push_str(&buf);
                if pending.ends_with('\n') {
                    let line = std::mem::take(&mut pending);
                    if tx.send(Ok(line.trim_end().to_string())).is_err() {
                        return;
                    }
                }
            }
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    }
}

fn cmd_monitor(store: &Path, follow: &Path, idle_exit: Option<f64>, flags: &DetectorFlags) -> Outcome {
    let (store, _) = open_store(store)?;
    let detector = train_detector(&store, flags.config()).map_err(data_err!("detector"))?;
    let idle = idle_exit.map(Duration::from_secs_f64);
    // bounded queue between the file reader and the evaluator
    let (tx, rx) = mpsc::sync_channel(1024);
    let path = follow.to_path_buf();
    let reader = thread::spawn(move || follow_lines(path, idle, tx));

    let tree = store.tree();
    let mut seg = StreamSegmenter::with_schema(store.log().schema().clone());
    let mut runs: HashMap<String, (RunMonitor<'_>, StateId)> = HashMap::new();
    let mut out = io::stdout().lock();
    let mut emit = |v: serde_json::Value| {
        let _ = writeln!(out, "{v}");
        let _ = out.flush();
    };
    for line in rx {
        let line = line.map_err(data_err!("io"))?;
        for item in seg.push_line(&line).map_err(data_err!("trace"))? {
            match item {
                StreamItem::Started { trace_id, initial } => {
                    let s0 = tree.abstract_state(&initial).map_err(data_err!("tree"))?;
                    runs.insert(trace_id.clone(), (detector.monitor(store.amdp(), trace_id), s0));
                }
                StreamItem::Step { trace_id, index, transition } => {
                    let Some((m, at)) = runs.get_mut(&trace_id) else { continue };
                    let next = tree.abstract_state(&transition.post).map_err(data_err!("tree"))?;
                    for ev in m.step(*at, &transition.action.name, next) {
                        let mut v = serde_json::to_value(&ev).expect("serializable");
                        v["trace_id"] = json!(trace_id);
                        v["index"] = json!(index);
                        emit(v);
                    }
                    *at = next;
                }
                StreamItem::Finished { trace_id, .. } => {
                    if let Some((m, _)) = runs.remove(&trace_id) {
                        let report: RunReport = m.finish();
                        emit(json!({ "event": "run_end", "report": report }));
                    }
                }
            }
        }
    }
    let _ = reader.join();
    Ok(0)
}

fn cmd_refine(
    store_dir: &Path,
    prop: &str,
    max_iters: usize,
    out: Option<PathBuf>,
    tree: &TreeFlags,
    checker: &CheckFlags,
) -> Outcome {
    let q = parse_prop(prop)?;
    let (store, manifest) = open_store(store_dir)?;
    let mut cfg = RefinementConfig::new(q);
    cfg.max_iterations = max_iters;
    cfg.tree = tree.config();
    cfg.checker = checker.config();
    if cfg.property.threshold.is_none() {
        return Err(Failure {
            code: 2,
            kind: "usage",
            message: "refine needs a thresholded property, e.g. Pmin<=0.05 [F \"failure\"]".into(),
        });
    }
    let log = store.log().clone();
    let res = verify_refine_loop_with(log, store.tree().clone(), store.rules().to_vec(), &cfg, |_, rec| {
        print_json(&json!({ "iteration": rec }));
    })
    .map_err(data_err!("refine"))?;
    print_json(&json!({ "result": res.result, "leaves": res.store.tree().num_leaves() }));
    if let Some(dir) = out {
        res.store.save(&dir, &manifest).map_err(data_err!("io"))?;
    }
    let violated = res.iterations.last().is_some_and(|r| r.verdict == Verdict::Violated);
    Ok(if matches!(res.result, LoopResult::RealCounterexample { .. }) || violated { 1 } else { 0 })
}

fn cmd_export(store: &Path, _format: Format, out: &Path) -> Outcome {
    let (store, _) = open_store(store)?;
    let (tra, lab) = store.amdp().export_explicit();
    write_file(&out.join("model.tra"), tra)?;
    write_file(&out.join("model.lab"), lab)?;
    print_json(&json!({ "states": store.amdp().states().len(), "out": out }));
    Ok(0)
}

fn cmd_report(scores: &Path, truth: &Path, as_json: bool) -> Outcome {
    let text = fs::read_to_string(scores).map_err(data_err!("io"))?;
    let reports: Vec<RunReport> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(data_err!("scores"))?;
    let truth = read_truth(truth).map_err(data_err!("truth"))?;
    let report = DetectionReport::evaluate(&reports, &truth);
    if as_json {
        print_json(&report);
    } else {
        print!("{}", report.table());
    }
    Ok(0)
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Gen { config, seed, out } => cmd_gen(config, seed, &out),
        Cmd::Learn { log, out, tree } => cmd_learn(&log, &out, &tree),
        Cmd::Build { log, tree, rules, out } => cmd_build(&log, &tree, rules, &out),
        Cmd::Check { store, prop, checker } => cmd_check(&store, &prop, &checker),
        Cmd::Score { store, log, detector } => cmd_score(&store, &log, &detector),
        Cmd::Monitor { store, follow, idle_exit, detector } => cmd_monitor(&store, &follow, idle_exit, &detector),
        Cmd::Refine { store, prop, max_iters, out, tree, checker } => {
            cmd_refine(&store, &prop, max_iters, out, &tree, &checker)
        }
        Cmd::Export { store, format, out } => cmd_export(&store, format, &out),
        Cmd::Report { scores, truth, json } => cmd_report(&scores, &truth, json),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(Failure { code: 2, kind: "usage", message: e.to_string().trim_end().to_string() });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => fail(f),
    }
}
