//! Run configuration and deterministic execution planning.
//!
//! A `RunConfig` is one TOML file holding the backend registry, dataset and
//! selection choices, per-module blocks, and the single global seed that
//! every stage derives from. Its canonical serialization hashes to the run
//! id, so identical configs always land in the same run directory and a
//! changed config gets a fresh one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::backend::registry::BackendRegistry;
use crate::gcg::GcgConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeBlock {
    pub backend: String,
    #[serde(default = "default_layer")]
    pub layer_index: usize,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_layer() -> usize {
    1
}
fn default_lambda_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2]
}
fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackBlock {
    pub backend: String,
    #[serde(default)]
    pub gcg: GcgConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentBlock {
    pub backend: String,
    #[serde(default = "default_essay_count")]
    pub essay_count: usize,
    #[serde(default)]
    pub suffix: Option<String>,
}

fn default_essay_count() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// TOML file of problem definitions (`[[problems]]`).
    #[serde(default)]
    pub problems_file: Option<PathBuf>,
    /// Directory of prompt template TOML files.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub backends: BackendRegistry,
    /// Problem ids selected for this run.
    #[serde(default)]
    pub problems: Vec<String>,
    /// Template ids selected for this run.
    #[serde(default)]
    pub templates: Vec<String>,
    #[serde(default)]
    pub probe: Option<ProbeBlock>,
    #[serde(default)]
    pub attack: Option<AttackBlock>,
    #[serde(default)]
    pub experiment: Option<ExperimentBlock>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        if !path.exists() {
            return Err(StoreError::FileMissing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Canonical serialization: struct field order is fixed and maps are
    /// ordered, so equal configs serialize to equal bytes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Content hash of the canonical serialization; used as the run id.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |field: &str, message: String| StoreError::ConfigInvalid {
            field: field.to_string(),
            message,
        };
        let check_backend = |field: &str, name: &str| {
            if self.backends.contains(name) {
                Ok(())
            } else {
                Err(invalid(
                    field,
                    format!(
                        "unknown backend {name:?}; registered: {:?}",
                        self.backends.names()
                    ),
                ))
            }
        };
        if let Some(p) = &self.probe {
            check_backend("probe.backend", &p.backend)?;
            if !(0.0 < p.val_fraction && p.val_fraction < 1.0) {
                return Err(invalid(
                    "probe.val_fraction",
                    format!("must lie in (0, 1), got {}", p.val_fraction),
                ));
            }
            if p.lambda_grid.is_empty() {
                return Err(invalid("probe.lambda_grid", "must be non-empty".into()));
            }
        }
        if let Some(a) = &self.attack {
            check_backend("attack.backend", &a.backend)?;
            if a.gcg.suffix_length == 0 {
                return Err(invalid(
                    "attack.gcg.suffix_length",
                    "must be positive".into(),
                ));
            }
        }
        if let Some(e) = &self.experiment {
            check_backend("experiment.backend", &e.backend)?;
            if e.essay_count == 0 {
                return Err(invalid("experiment.essay_count", "must be positive".into()));
            }
        }
        if self.probe.is_some() || self.attack.is_some() || self.experiment.is_some() {
            if self.problems.is_empty() {
                return Err(invalid("problems", "must select at least one problem".into()));
            }
            if self.templates.is_empty() {
                return Err(invalid(
                    "templates",
                    "must select at least one template".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStage {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub run_id: String,
    pub stages: Vec<PlanStage>,
}

impl ExecutionPlan {
    /// Content hash of the plan; equal configs give equal plan hashes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("plan serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable plan for `--dry-run`.
    pub fn describe(&self) -> String {
        let mut out = format!("run {}\n", self.run_id);
        for (i, s) in self.stages.iter().enumerate() {
            out.push_str(&format!(
                "{}. {} [{} -> {}]\n",
                i + 1,
                s.name,
                s.inputs.join(", "),
                s.outputs.join(", ")
            ));
        }
        out
    }
}

/// Validates the config and lays out the stage DAG in execution order:
/// ingest -> grade -> probe -> attack -> prune -> experiments, with stages
/// omitted when their config block is absent.
pub fn resolve_run(config: &RunConfig) -> Result<ExecutionPlan, StoreError> {
    config.validate()?;
    let run_id = config.content_hash();
    let mut stages = Vec::new();
    let mut stage = |name: &str, inputs: &[&str], outputs: &[&str]| {
        stages.push(PlanStage {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        });
    };
    if config.dataset.is_some() {
        stage("ingest", &["dataset"], &["essay_store"]);
    }
    let essays = if config.dataset.is_some() {
        "essay_store"
    } else {
        "synthetic_essays"
    };
    if config.probe.is_some() {
        stage("grade", &[essays], &["grade_rows"]);
        stage("probe", &["grade_rows", "activations"], &["probe_artifacts"]);
    }
    if config.attack.is_some() {
        stage("attack", &["probe_artifacts", essays], &["suffix_candidates"]);
        stage("prune", &["suffix_candidates"], &["pruned_suffixes"]);
    }
    if config.experiment.is_some() {
        stage("experiments", &[essays], &["gain_reports"]);
    }
    Ok(ExecutionPlan { run_id, stages })
}
