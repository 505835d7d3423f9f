//! Synthetic file-operations agent traces with injected anomalies.
//!
//! Each run reads `TASK.md`, then a plan file, then performs a random mix of
//! `readFile`/`writeFile` calls. A run that finishes its operations within the
//! budget raises `opsCompleted` in its last state and succeeds; a run that
//! overruns the budget raises `budgetExhausted` and fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::sha256_hex;
use crate::trace::{ActionSymbol, ConcreteState, TerminalStatus, Trace, TraceLog, Transition, Value};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    TooLong,
    TooShort,
    RatioSkew,
    MalformedPath,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::TooLong,
        AnomalyKind::TooShort,
        AnomalyKind::RatioSkew,
        AnomalyKind::MalformedPath,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_baseline: usize,
    pub n_anomalous: usize,
    /// Baseline run length in tool calls, inclusive.
    pub length: Range<usize>,
    /// Baseline per-step write probability.
    pub write_ratio: Range<f64>,
    /// Steps allowed before the run fails.
    pub budget: usize,
    /// Size of the pool of workspace files that can be read.
    pub files: usize,
    pub anomaly_mix: BTreeMap<AnomalyKind, f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            n_baseline: 1000,
            n_anomalous: 1000,
            length: Range { min: 8, max: 40 },
            write_ratio: Range { min: 0.3, max: 0.7 },
            budget: 40,
            files: 8,
            anomaly_mix: AnomalyKind::ALL.iter().map(|k| (*k, 0.25)).collect(),
        }
    }
}

const TOO_LONG: Range<usize> = Range { min: 120, max: 200 };
const TOO_SHORT: Range<usize> = Range { min: 1, max: 2 };
const SKEWED_RATIOS: [f64; 2] = [0.02, 0.98];
const PRELUDE: [&str; 2] = ["TASK.md", "PLAN.md"];
const MALFORMED: &str = "src//../\u{0}bad path";

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        if self.length.min < 1 || self.length.min > self.length.max {
            return bad(format!("length range {}..={} is empty or below 1", self.length.min, self.length.max));
        }
        if self.length.min < PRELUDE.len() {
            return bad(format!("baseline runs need at least {} steps", PRELUDE.len()));
        }
        let w = self.write_ratio;
        if !(0.0..=1.0).contains(&w.min) || !(0.0..=1.0).contains(&w.max) || w.min > w.max {
            return bad("write_ratio must be a sub-range of [0, 1]".into());
        }
        if self.budget < self.length.max {
            return bad(format!("budget {} is below the baseline maximum length", self.budget));
        }
        if self.files == 0 {
            return bad("file pool must not be empty".into());
        }
        if self.anomaly_mix.values().any(|w| !(*w >= 0.0)) {
            return bad("anomaly weights must be non-negative".into());
        }
        let total: f64 = self.anomaly_mix.values().sum();
        if self.n_anomalous > 0 && (total - 1.0).abs() > 1e-9 {
            return bad(format!("anomaly weights sum to {total}, expected 1"));
        }
        Ok(())
    }
}

/// One generated corpus with ground truth for the anomalous part.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub baseline: TraceLog,
    pub anomalous: TraceLog,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub trace_id: String,
    pub kind: AnomalyKind,
}

struct RunPlan {
    length: usize,
    write_p: f64,
    /// Step index at which a malformed path is read.
    malformed_at: Option<usize>,
}

fn snapshot(budget: usize, writes: i64, last: &str, iteration: usize, done: bool, exhausted: bool) -> ConcreteState {
    ConcreteState::new(
        [("budget".to_string(), Value::Integer(budget as i64))].into(),
        [
            ("opsCompleted".to_string(), Value::Boolean(done)),
            ("budgetExhausted".to_string(), Value::Boolean(exhausted)),
        ]
        .into(),
        [
            ("filesWrittenCount".to_string(), Value::Integer(writes)),
            ("lastFileRead".to_string(), Value::Text(last.to_string())),
            ("iteration".to_string(), Value::Integer(iteration as i64)),
        ]
        .into(),
    )
    .expect("disjoint partitions")
}

fn digest(path: &str) -> String {
    sha256_hex(path.as_bytes())[..16].to_string()
}

fn run(cfg: &GeneratorConfig, id: String, plan: &RunPlan, rng: &mut ChaCha8Rng) -> Trace {
    let pool: Vec<String> = (0..cfg.files).map(|i| format!("src/file{i}.rs")).collect();
    let mut writes = 0i64;
    let mut last = String::new();
    let mut pre = snapshot(cfg.budget, 0, "", 0, false, false);
    let mut steps = Vec::with_capacity(plan.length);
    let success = plan.length <= cfg.budget;
    for i in 0..plan.length {
        let (name, path) = if i < PRELUDE.len() {
            ("readFile", PRELUDE[i].to_string())
        } else if plan.malformed_at == Some(i) {
            ("readFile", MALFORMED.to_string())
        } else if rng.gen_bool(plan.write_p) {
            ("writeFile", pool[rng.gen_range(0..pool.len())].clone())
        } else {
            ("readFile", pool[rng.gen_range(0..pool.len())].clone())
        };
        if name == "writeFile" {
            writes += 1;
        } else {
            last = path.clone();
        }
        let final_step = i + 1 == plan.length;
        let post = snapshot(cfg.budget, writes, &last, i + 1, final_step && success, final_step && !success);
        steps.push(Transition {
            pre: pre.clone(),
            action: ActionSymbol {
                name: name.to_string(),
                args_digest: Some(digest(&path)),
            },
            post: post.clone(),
        });
        pre = post;
    }
    let status = if success { TerminalStatus::Success } else { TerminalStatus::Failure };
    Trace::new(id, None, steps, status).expect("generated traces chain")
}

fn pick_kind(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> AnomalyKind {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = AnomalyKind::MalformedPath;
    for (k, w) in &cfg.anomaly_mix {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = *k;
        if x < acc {
            return *k;
        }
    }
    last
}

/// Deterministic in `cfg.seed`.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus, GeneratorError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let baseline_plan = |rng: &mut ChaCha8Rng| RunPlan {
        length: rng.gen_range(cfg.length.min..=cfg.length.max),
        write_p: rng.gen_range(cfg.write_ratio.min..=cfg.write_ratio.max),
        malformed_at: None,
    };
    let mut baseline = TraceLog::new();
    for i in 0..cfg.n_baseline {
        let plan = baseline_plan(&mut rng);
        baseline.push(run(cfg, format!("base-{i:05}"), &plan, &mut rng)).expect("uniform schema");
    }
    let mut anomalous = TraceLog::new();
    let mut truth = Vec::with_capacity(cfg.n_anomalous);
    for i in 0..cfg.n_anomalous {
        let kind = pick_kind(cfg, &mut rng);
        let mut plan = baseline_plan(&mut rng);
        match kind {
            AnomalyKind::TooLong => plan.length = rng.gen_range(TOO_LONG.min..=TOO_LONG.max),
            AnomalyKind::TooShort => plan.length = rng.gen_range(TOO_SHORT.min..=TOO_SHORT.max),
            AnomalyKind::RatioSkew => plan.write_p = SKEWED_RATIOS[rng.gen_range(0..SKEWED_RATIOS.len())],
            AnomalyKind::MalformedPath => {
                plan.malformed_at = Some(rng.gen_range(PRELUDE.len()..plan.length.max(PRELUDE.len() + 1)))
            }
        }
        let id = format!("anom-{i:05}");
        anomalous.push(run(cfg, id.clone(), &plan, &mut rng)).expect("uniform schema");
        truth.push(TruthRecord { trace_id: id, kind });
    }
    Ok(Corpus {
        baseline,
        anomalous,
        truth,
    })
}

impl Corpus {
    /// Writes `baseline.jsonl`, `anomalous.jsonl` and `truth.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<(), GeneratorError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("baseline.jsonl"), self.baseline.to_jsonl())?;
        fs::write(dir.join("anomalous.jsonl"), self.anomalous.to_jsonl())?;
        let mut f = fs::File::create(dir.join("truth.jsonl"))?;
        for t in &self.truth {
            writeln!(f, "{}", serde_json::to_string(t).expect("truth serializes"))?;
        }
        Ok(())
    }
}
