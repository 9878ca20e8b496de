//! Chat-template mitigation: role-token rewriting and the paired comparison
//! between a baseline model and a model fine-tuned on the rewritten
//! template.

use serde::{Deserialize, Serialize};

use super::gain::{run_gain_experiment, GainExperimentSpec, GainReport};
use super::ExperimentError;
use crate::backend::{BlackBoxBackend, GenerationConfig};
use crate::harness::gain::EvalCell;

/// Record of a role-token rewrite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffReport {
    pub role_token: String,
    pub replacement: String,
    /// Byte offsets (in the original text) of the rewritten occurrences.
    pub positions: Vec<usize>,
    /// True when the input was already rewritten and returned unchanged.
    pub already_rewritten: bool,
}

/// Replaces every header occurrence of `role_token` with `replacement`.
///
/// A header occurrence is one immediately preceded by the closing `|>` of a
/// special token, as in `<|start_header_id|>user<|end_header_id|>`; the same
/// word elsewhere in the template (e.g. inside instructions) is left alone.
/// The replacement must be registered as a single special token in the
/// tokenizer so that user-typed text can never produce it. Rewriting an
/// already-rewritten template is a no-op.
pub fn rewrite_chat_template(
    template: &str,
    role_token: &str,
    replacement: &str,
) -> Result<(String, DiffReport), ExperimentError> {
    let mut positions = Vec::new();
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    let mut search = 0;
    while let Some(rel) = template[search..].find(role_token) {
        let at = search + rel;
        if template[..at].ends_with("|>") {
            out.push_str(&template[last..at]);
            out.push_str(replacement);
            positions.push(at);
            last = at + role_token.len();
        }
        search = at + role_token.len();
    }
    out.push_str(&template[last..]);
    if positions.is_empty() {
        // idempotence: a template whose headers already carry the
        // replacement is returned unchanged instead of erroring
        if template.contains(replacement) {
            return Ok((
                template.to_string(),
                DiffReport {
                    role_token: role_token.to_string(),
                    replacement: replacement.to_string(),
                    positions,
                    already_rewritten: true,
                },
            ));
        }
        return Err(ExperimentError::RoleTokenNotFound(role_token.to_string()));
    }
    Ok((
        out,
        DiffReport {
            role_token: role_token.to_string(),
            replacement: replacement.to_string(),
            positions,
            already_rewritten: false,
        },
    ))
}

/// Configuration of a mitigation comparison over a fixed set of cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateMitigationSpec {
    /// Suffixes measured on both arms.
    pub suffixes: Vec<String>,
    pub gen: GenerationConfig,
    pub seed: u64,
}

/// Paired result for one suffix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationRow {
    pub suffix: String,
    pub baseline: GainReport,
    pub mitigated: GainReport,
    pub baseline_mean: f64,
    pub mitigated_mean: f64,
    /// `baseline_mean - mitigated_mean`; positive when the mitigation
    /// reduced the suffix's effect.
    pub reduction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationReport {
    pub rows: Vec<MitigationRow>,
    pub seed: u64,
}

/// Measures every suffix on both arms with identical essays and sampling
/// seeds, so temperature-0 differences are attributable to the models alone.
pub fn run_mitigation_comparison(
    baseline: &dyn BlackBoxBackend,
    mitigated: &dyn BlackBoxBackend,
    cells: &[EvalCell<'_>],
    spec: &TemplateMitigationSpec,
) -> MitigationReport {
    let rows = spec
        .suffixes
        .iter()
        .map(|suffix| {
            let gain_spec = GainExperimentSpec {
                suffix: Some(suffix.clone()),
                gen: spec.gen.clone(),
                seed: spec.seed,
            };
            let b = run_gain_experiment(baseline, cells, &gain_spec);
            let m = run_gain_experiment(mitigated, cells, &gain_spec);
            let (bm, mm) = (b.pooled_mean_gain, m.pooled_mean_gain);
            MitigationRow {
                suffix: suffix.clone(),
                baseline: b,
                mitigated: m,
                baseline_mean: bm,
                mitigated_mean: mm,
                reduction: bm - mm,
            }
        })
        .collect();
    MitigationReport {
        rows,
        seed: spec.seed,
    }
}
