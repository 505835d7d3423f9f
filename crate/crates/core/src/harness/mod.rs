//! Synthetic corpus generation and end-to-end pipelines.

pub mod generator;
pub mod pipeline;

pub use generator::{generate_corpus, AnomalyKind, Corpus, GeneratorConfig, TruthRecord};
pub use pipeline::{run_pipeline, DetectionReport, PipelineConfig};
