//! End-to-end wiring: learn, build, check, score and evaluate against ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amdp::{terminal_status_rules, AmdpError, LabelRule};
use crate::anomaly::{AnomalyError, Detector, DetectorConfig, RunReport, RunVerdict};
use crate::checker::{check, CheckError, CheckResult, CheckerConfig, ReachQuery};
use crate::harness::generator::{AnomalyKind, TruthRecord};
use crate::store::{sha256_hex, LinkedStore, StoreError};
use crate::trace::{TraceError, TraceLog};
use crate::tree::{build_initial_tree, PredicateTree, TreeConfig, TreeError};
use crate::trie::AbstractPath;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Amdp(#[from] AmdpError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_log: PathBuf,
    #[serde(default)]
    pub test_logs: Vec<PathBuf>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default = "terminal_status_rules")]
    pub label_rules: Vec<LabelRule>,
    #[serde(default = "default_properties")]
    pub properties: Vec<String>,
    #[serde(default)]
    pub checker: CheckerConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    pub out_dir: PathBuf,
}

fn default_properties() -> Vec<String> {
    vec![r#"Pmax=? [F "success"]"#.into(), r#"Pmin=? [F "failure"]"#.into()]
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for p in std::iter::once(&self.train_log).chain(&self.test_logs).chain(&self.truth) {
            if !p.exists() {
                return Err(PipelineError::Config(format!("{} does not exist", p.display())));
            }
        }
        for p in &self.properties {
            p.parse::<ReachQuery>()?;
        }
        self.detector.validate()?;
        Ok(())
    }
}

/// Stable digest of a tree configuration.
pub fn config_digest(cfg: &TreeConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Abstract paths of every trace in `log` under `tree`.
pub fn abstract_runs(log: &TraceLog, tree: &PredicateTree) -> Result<Vec<(String, AbstractPath)>, TreeError> {
    log.traces()
        .iter()
        .enumerate()
        .map(|(i, t)| Ok((t.trace_id().to_string(), AbstractPath::of_trace(t, i, tree)?.0)))
        .collect()
}

/// Detector trained on the store's own log.
pub fn train_detector(store: &LinkedStore, cfg: DetectorConfig) -> Result<Detector, PipelineError> {
    let runs = abstract_runs(store.log(), store.tree())?;
    Ok(Detector::train(store.amdp(), &runs, cfg)?)
}

pub fn score_log(store: &LinkedStore, detector: &Detector, log: &TraceLog) -> Result<Vec<RunReport>, PipelineError> {
    Ok(abstract_runs(log, store.tree())?
        .iter()
        .map(|(id, p)| detector.score(store.amdp(), id, p))
        .collect())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>, PipelineError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub total: usize,
    pub flagged: usize,
}

/// Confusion matrix of run verdicts against ground truth; runs absent from
/// the truth file count as normal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
    pub by_kind: BTreeMap<AnomalyKind, KindCounts>,
}

impl DetectionReport {
    pub fn evaluate(reports: &[RunReport], truth: &[TruthRecord]) -> Self {
        let kinds: BTreeMap<&str, AnomalyKind> = truth.iter().map(|t| (t.trace_id.as_str(), t.kind)).collect();
        let mut r = DetectionReport::default();
        for rep in reports {
            let flagged = rep.verdict == RunVerdict::Anomalous;
            match kinds.get(rep.trace_id.as_str()) {
                Some(k) => {
                    let c = r.by_kind.entry(*k).or_default();
                    c.total += 1;
                    c.flagged += flagged as usize;
                    if flagged {
                        r.tp += 1
                    } else {
                        r.fn_ += 1
                    }
                }
                None if flagged => r.fp += 1,
                None => r.tn += 1,
            }
        }
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        r.precision = ratio(r.tp, r.tp + r.fp);
        r.recall = ratio(r.tp, r.tp + r.fn_);
        r.fpr = ratio(r.fp, r.fp + r.tn);
        r
    }

    pub fn kind_recall(&self, k: AnomalyKind) -> Option<f64> {
        self.by_kind.get(&k).filter(|c| c.total > 0).map(|c| c.flagged as f64 / c.total as f64)
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let mut out = format!(
            "tp {}  fp {}  tn {}  fn {}\nprecision {}  recall {}  fpr {}\n",
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            f(self.precision),
            f(self.recall),
            f(self.fpr)
        );
        for (k, c) in &self.by_kind {
            let name = serde_json::to_value(k).expect("kind serializes");
            out.push_str(&format!(
                "{:<16} {:>5}/{:<5} flagged\n",
                name.as_str().unwrap_or_default(),
                c.flagged,
                c.total
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub store: LinkedStore,
    pub checks: Vec<CheckResult>,
    pub scores: Vec<RunReport>,
    pub report: Option<DetectionReport>,
}

/// Learn, build, check every property, and score the test logs.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let bytes = fs::read(&cfg.train_log)?;
    let log = Arc::new(TraceLog::from_reader(bytes.as_slice())?);
    let tree = build_initial_tree(&log, &cfg.tree)?;
    let store = LinkedStore::build(log, tree, cfg.label_rules.clone())?;
    store.save(
        &cfg.out_dir.join("store"),
        &crate::store::StoreManifest {
            log_path: cfg.train_log.clone(),
            log_sha256: sha256_hex(&bytes),
            label_rules: cfg.label_rules.clone(),
            config_digest: config_digest(&cfg.tree),
        },
    )?;
    let checks = cfg
        .properties
        .iter()
        .map(|p| Ok(check(store.amdp(), &p.parse()?, &cfg.checker)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let detector = train_detector(&store, cfg.detector.clone())?;
    let mut scores = Vec::new();
    for p in &cfg.test_logs {
        scores.extend(score_log(&store, &detector, &TraceLog::from_path(p)?)?);
    }
    let mut lines = String::new();
    for s in &scores {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    fs::write(cfg.out_dir.join("scores.jsonl"), lines)?;
    let report = match &cfg.truth {
        Some(t) => Some(DetectionReport::evaluate(&scores, &read_truth(t)?)),
        None => None,
    };
    Ok(PipelineOutput {
        store,
        checks,
        scores,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(id: &str, anomalous: bool) -> RunReport {
        RunReport {
            trace_id: id.into(),
            loglik: Some(-1.0),
            length: 1,
            verdict: if anomalous { RunVerdict::Anomalous } else { RunVerdict::Normal },
            checkpoint_warnings: vec![],
            unseen_transition_at: None,
        }
    }

    #[test]
    fn confusion_matrix_adds_up() {
        let truth = vec![
            TruthRecord { trace_id: "a".into(), kind: AnomalyKind::TooLong },
            TruthRecord { trace_id: "b".into(), kind: AnomalyKind::TooShort },
        ];
        let reports = vec![rep("a", true), rep("b", false), rep("c", true), rep("d", false), rep("e", false)];
        let r = DetectionReport::evaluate(&reports, &truth);
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1, 1, 1, 2));
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, reports.len());
        assert_eq!(r.recall, Some(0.5));
        assert_eq!(r.fpr, Some(1.0 / 3.0));
        assert_eq!(r.kind_recall(AnomalyKind::TooLong), Some(1.0));
        assert_eq!(r.kind_recall(AnomalyKind::RatioSkew), None);
        assert!(r.table().contains("too_long"));
    }
}
