//! Dataset ingestion, activation caching, run configuration, and the
//! append-only result store.

pub mod cache;
pub mod config;
pub mod ingest;
pub mod results;

use thiserror::Error;

pub use cache::{decode_entry, ActivationCache};
pub use config::{resolve_run, ExecutionPlan, PlanStage, RunConfig};
pub use ingest::{
    ingest_dataset, paper_problem_for_essay_set, parse_dataset, EssayStore, IngestReport,
};
pub use results::{RecordKind, ResultRow, ResultStore};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dataset file missing: {0}")]
    FileMissing(String),
    #[error("dataset schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("stale cache entry for {0} (recompute required)")]
    StaleCache(String),
    #[error("invalid run config: field `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("backend: {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("serialization: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
