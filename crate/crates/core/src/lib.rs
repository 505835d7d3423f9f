//! Learning finite abstractions of agent traces, inducing an MDP over them,
//! checking reachability properties, scoring runs, and refining the abstraction.

pub mod trace;
pub mod tree;
pub mod trie;
pub mod amdp;
pub mod checker;
pub mod anomaly;
pub mod store;
pub mod refine;
pub mod harness;

pub use trace::{
    ActionSymbol, ConcreteState, Event, EventKind, Partition, Schema, StateRef, TerminalStatus,
    Trace, TraceError, TraceLog, Transition, TypeTag, Value,
};
pub use tree::{Predicate, PredicateTree, StateId, TreeConfig, TreeError};
pub use trie::{AbstractPath, TraceTrie};
pub use amdp::{AggregationMode, Amdp, AmdpError, LabelRule};
pub use checker::{check, CheckError, CheckResult, CheckerConfig, Direction, ReachQuery, Verdict};
pub use anomaly::{AnomalyError, Detector, DetectorConfig, DetectorMode, RunReport, RunVerdict};
pub use store::{LinkedStore, StoreError, StoreManifest};
pub use refine::{verify_refine_loop, LoopOutcome, LoopResult, RefinementConfig};
pub use harness::{generate_corpus, AnomalyKind, Corpus, DetectionReport, GeneratorConfig, PipelineConfig};
