//! Config-driven runs: collection, scoring, selection, evaluation, and
//! analysis, each cached by a hash of its configuration and upstream stages.

mod config;
mod manifest;
mod pipeline;

pub use config::{
    AnalysisSection, DatamodelsSection, DatasetSection, EvaluationSection, OracleSection, PoolSection, RunConfig,
    Seeds, SelectionSection, PROTOCOLS, STAGES,
};
pub use manifest::{canonical_json, sha256_hex, RunManifest, StageEntry, StageStatus, RUN_MANIFEST};
pub use pipeline::{run_pipeline, run_pipeline_with, RunOptions};
