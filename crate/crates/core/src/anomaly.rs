//! Run scoring by model log-likelihood, offline run-level detection, and
//! prefix-conditioned online warnings at checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amdp::Amdp;
use crate::tree::StateId;
use crate::trie::AbstractPath;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("need at least two finite scores, got {0}")]
    InsufficientData(usize),
    #[error("checkpoint {0} is not armed")]
    UnarmedCheckpoint(usize),
    #[error("quantile argument {0} outside (0, 1)")]
    DomainError(f64),
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 over the open unit interval).
pub fn normal_quantile(p: f64) -> Result<f64, AnomalyError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(AnomalyError::DomainError(p));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    Ok(if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub trace_id: String,
    /// Natural-log likelihood; `-inf` when a transition was never observed.
    pub loglik: f64,
    pub length: usize,
    pub unseen_transition_at: Option<usize>,
}

impl RunScore {
    pub fn is_finite(&self) -> bool {
        self.unseen_transition_at.is_none()
    }
}

/// `ln P(s, a, s')`, or `None` when the transition has no support.
pub fn log_factor(amdp: &Amdp, s: StateId, a: &str, s2: StateId) -> Option<f64> {
    match amdp.probability(s, a, s2) {
        Ok(p) if p > 0.0 => Some(p.ln()),
        _ => None,
    }
}

/// Sum of log transition probabilities along `run`.
pub fn run_loglik(amdp: &Amdp, trace_id: &str, run: &AbstractPath) -> RunScore {
    let mut ll = 0.0;
    for (i, (s, a, t)) in run.steps().enumerate() {
        match log_factor(amdp, s, a, t) {
            Some(f) => ll += f,
            None => {
                return RunScore {
                    trace_id: trace_id.to_string(),
                    loglik: f64::NEG_INFINITY,
                    length: run.len(),
                    unseen_transition_at: Some(i),
                }
            }
        }
    }
    RunScore {
        trace_id: trace_id.to_string(),
        loglik: ll,
        length: run.len(),
        unseen_transition_at: None,
    }
}

/// Mean, spread and sorted sample of finite scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    /// Finite scores used.
    pub n: usize,
    /// Scores excluded for being `-inf`.
    pub excluded: usize,
    pub mean: f64,
    /// Square root of the sample variance with divisor `n - 1`.
    pub sd: f64,
    pub skewness: f64,
    pub sorted: Vec<f64>,
}

impl ScoreStats {
    pub fn from_values(values: &[f64]) -> Result<Self, AnomalyError> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let excluded = values.len() - sorted.len();
        let n = sorted.len();
        if n < 2 {
            return Err(AnomalyError::InsufficientData(n));
        }
        sorted.sort_by(f64::total_cmp);
        let nf = n as f64;
        let mean = sorted.iter().sum::<f64>() / nf;
        let ss: f64 = sorted.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (nf - 1.0)).sqrt();
        let m2 = ss / nf;
        let m3 = sorted.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
        let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
        Ok(ScoreStats {
            n,
            excluded,
            mean,
            sd,
            skewness,
            sorted,
        })
    }

    /// Linear-interpolated empirical quantile of the finite scores.
    pub fn quantile(&self, q: f64) -> f64 {
        let pos = q.clamp(0.0, 1.0) * (self.n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        self.sorted[lo] + (self.sorted[hi] - self.sorted[lo]) * (pos - lo as f64)
    }

    /// Lower rejection threshold for significance `alpha`.
    pub fn threshold(&self, alpha: f64, mode: DetectorMode) -> Result<f64, AnomalyError> {
        let normal = mode == DetectorMode::Normal && self.skewness.abs() <= 2.0;
        if normal {
            Ok(self.mean - normal_quantile(1.0 - alpha)? * self.sd)
        } else {
            Ok(self.quantile(alpha))
        }
    }
}

pub fn offline_stats(scores: &[RunScore]) -> Result<ScoreStats, AnomalyError> {
    ScoreStats::from_values(&scores.iter().map(|s| s.loglik).collect::<Vec<_>>())
}

/// One-sided rule `loglik < mean - z(1-alpha) * sd`; `-inf` is always anomalous.
pub fn offline_flag(loglik: f64, mean: f64, sd: f64, alpha: f64) -> Result<bool, AnomalyError> {
    if loglik == f64::NEG_INFINITY {
        return Ok(true);
    }
    Ok(loglik < mean - normal_quantile(1.0 - alpha)? * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// Gaussian threshold, replaced by the empirical quantile when |skewness| > 2.
    #[default]
    Normal,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub alpha: f64,
    /// Prefix lengths to check; `None` means every 10 steps up to the longest training run.
    pub checkpoints: Option<Vec<usize>>,
    pub mode: DetectorMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            alpha: 0.05,
            checkpoints: None,
            mode: DetectorMode::Normal,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), AnomalyError> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(AnomalyError::InvalidConfig(format!(
                "alpha must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        if let Some(k) = &self.checkpoints {
            if k.first() == Some(&0) || k.windows(2).any(|w| w[0] >= w[1]) {
                return Err(AnomalyError::InvalidConfig(
                    "checkpoints must be positive and strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    fn resolve_checkpoints(&self, longest: usize) -> Vec<usize> {
        match &self.checkpoints {
            Some(k) => k.clone(),
            None => (1..=longest / 10).map(|i| i * 10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub k: usize,
    /// Runs at least `k` steps long.
    pub n_runs: usize,
    /// `None` when fewer than two truncated runs have a finite score.
    pub stats: Option<ScoreStats>,
}

impl CheckpointStats {
    pub fn armed(&self) -> bool {
        self.stats.is_some()
    }
}

/// Per-checkpoint statistics of `ln` likelihoods of runs truncated to `k` steps;
/// runs shorter than `k` are excluded.
pub fn prefix_stats(runs: &[AbstractPath], amdp: &Amdp, ks: &[usize]) -> BTreeMap<usize, CheckpointStats> {
    // cumulative prefix scores, computed once per run
    let cumulative: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(r.len());
            for (s, a, t) in r.steps() {
                acc += log_factor(amdp, s, a, t).unwrap_or(f64::NEG_INFINITY);
                out.push(acc);
            }
            out
        })
        .collect();
    ks.iter()
        .map(|&k| {
            let values: Vec<f64> = cumulative
                .iter()
                .filter(|c| c.len() >= k)
                .map(|c| if k == 0 { 0.0 } else { c[k - 1] })
                .collect();
            (
                k,
                CheckpointStats {
                    k,
                    n_runs: values.len(),
                    stats: ScoreStats::from_values(&values).ok(),
                },
            )
        })
        .collect()
}

/// Warning rule at an armed checkpoint; `-inf` prefixes always warn.
pub fn online_check(
    prefix_loglik: f64,
    k: usize,
    stats: &BTreeMap<usize, CheckpointStats>,
    cfg: &DetectorConfig,
) -> Result<bool, AnomalyError> {
    if prefix_loglik == f64::NEG_INFINITY {
        return Ok(true);
    }
    let s = stats
        .get(&k)
        .and_then(|c| c.stats.as_ref())
        .ok_or(AnomalyError::UnarmedCheckpoint(k))?;
    Ok(prefix_loglik < s.threshold(cfg.alpha, cfg.mode)?)
}

/// Trained run-level and checkpoint statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    pub run_stats: ScoreStats,
    pub run_threshold: f64,
    pub checkpoints: BTreeMap<usize, CheckpointStats>,
    /// Thresholds of armed checkpoints.
    pub checkpoint_thresholds: BTreeMap<usize, f64>,
}

impl Detector {
    pub fn train(amdp: &Amdp, runs: &[(String, AbstractPath)], config: DetectorConfig) -> Result<Self, AnomalyError> {
        config.validate()?;
        let scores: Vec<RunScore> = runs.iter().map(|(id, r)| run_loglik(amdp, id, r)).collect();
        let run_stats = offline_stats(&scores)?;
        let run_threshold = run_stats.threshold(config.alpha, config.mode)?;
        let longest = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
        let ks = config.resolve_checkpoints(longest);
        let paths: Vec<AbstractPath> = runs.iter().map(|(_, r)| r.clone()).collect();
        let checkpoints = prefix_stats(&paths, amdp, &ks);
        let mut checkpoint_thresholds = BTreeMap::new();
        for (k, c) in &checkpoints {
            if let Some(s) = &c.stats {
                checkpoint_thresholds.insert(*k, s.threshold(config.alpha, config.mode)?);
            }
        }
        Ok(Detector {
            config,
            run_stats,
            run_threshold,
            checkpoints,
            checkpoint_thresholds,
        })
    }

    pub fn monitor<'a>(&'a self, amdp: &'a Amdp, trace_id: impl Into<String>) -> RunMonitor<'a> {
        RunMonitor {
            amdp,
            detector: self,
            trace_id: trace_id.into(),
            loglik: 0.0,
            length: 0,
            unseen_at: None,
            warnings: Vec::new(),
        }
    }

    /// Scores a complete run through the same monitor used for streaming.
    pub fn score(&self, amdp: &Amdp, trace_id: &str, run: &AbstractPath) -> RunReport {
        let mut m = self.monitor(amdp, trace_id);
        for (s, a, t) in run.steps() {
            m.step(s, a, t);
        }
        m.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointWarning {
    pub k: usize,
    pub loglik_k: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunVerdict {
    Normal,
    Anomalous,
}

/// One line of the score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub trace_id: String,
    /// `None` for the `-inf` sentinel.
    pub loglik: Option<f64>,
    pub length: usize,
    pub verdict: RunVerdict,
    pub checkpoint_warnings: Vec<CheckpointWarning>,
    pub unseen_transition_at: Option<usize>,
}

/// Something a monitor reports while a run is in progress.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MonitorEvent {
    UnseenTransition { step: usize },
    Checkpoint(CheckpointWarning),
}

/// Incremental scorer for one run.
pub struct RunMonitor<'a> {
    amdp: &'a Amdp,
    detector: &'a Detector,
    trace_id: String,
    loglik: f64,
    length: usize,
    unseen_at: Option<usize>,
    warnings: Vec<CheckpointWarning>,
}

impl RunMonitor<'_> {
    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Feeds one abstract transition.
    pub fn step(&mut self, s: StateId, a: &str, t: StateId) -> Vec<MonitorEvent> {
        let mut out = Vec::new();
        let index = self.length;
        self.length += 1;
        if self.unseen_at.is_some() {
            return out;
        }
        match log_factor(self.amdp, s, a, t) {
            None => {
                self.loglik = f64::NEG_INFINITY;
                self.unseen_at = Some(index);
                out.push(MonitorEvent::UnseenTransition { step: index });
            }
            Some(f) => {
                self.loglik += f;
                if let Some(&threshold) = self.detector.checkpoint_thresholds.get(&self.length) {
                    if self.loglik < threshold {
                        let w = CheckpointWarning {
                            k: self.length,
                            loglik_k: self.loglik,
                            threshold,
                        };
                        self.warnings.push(w.clone());
                        out.push(MonitorEvent::Checkpoint(w));
                    }
                }
            }
        }
        out
    }

    pub fn finish(self) -> RunReport {
        let anomalous = self.unseen_at.is_some() || self.loglik < self.detector.run_threshold;
        RunReport {
            trace_id: self.trace_id,
            loglik: self.loglik.is_finite().then_some(self.loglik),
            length: self.length,
            verdict: if anomalous {
                RunVerdict::Anomalous
            } else {
                RunVerdict::Normal
            },
            checkpoint_warnings: self.warnings,
            unseen_transition_at: self.unseen_at,
        }
    }
}
