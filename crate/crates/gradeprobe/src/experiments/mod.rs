//! Evaluation protocol drivers: held-out score-gain measurement, per-token
//! ablation, sentiment-flip score lowering, chat-template mitigation
//! comparison, and report emission.

pub mod ablation;
pub mod flip;
pub mod gain;
pub mod mitigation;
pub mod report;

use thiserror::Error;

pub use ablation::{run_ablation, AblationReport, AblationRow, AblationSpec};
pub use flip::{load_antonyms, sentiment_flip};
pub use gain::{run_gain_experiment, CellMean, GainExperimentSpec, GainReport};
pub use mitigation::{
    rewrite_chat_template, run_mitigation_comparison, DiffReport, MitigationReport, MitigationRow,
    TemplateMitigationSpec,
};
pub use report::emit_report;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("ablation requires suffixes of at least 2 tokens, got {0}")]
    SuffixTooShort(usize),
    #[error("suffix contains no words covered by the antonym map")]
    NoReplacementsMade,
    #[error("role token {0:?} not found in any header position")]
    RoleTokenNotFound(String),
    #[error("antonym map parse: {0}")]
    AntonymParse(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serialize(#[from] serde_json::Error),
}
