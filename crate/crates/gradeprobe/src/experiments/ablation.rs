//! Single-token ablation of adversarial suffixes.
//!
//! Each variant removes exactly one token from a suffix and re-measures the
//! pooled gain; a baseline row keeps the full suffix. Positions whose
//! removal drops the gain by more than a configurable margin are flagged as
//! load-bearing (the paper's "user"-importance finding surfaces this way).

use serde::{Deserialize, Serialize};

use super::gain::{run_gain_experiment, GainExperimentSpec, GainReport};
use super::ExperimentError;
use crate::backend::{BlackBoxBackend, GenerationConfig};
use crate::harness::gain::EvalCell;
use crate::token::Tokenizer;

/// Configuration of an ablation sweep over one or more suffixes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    /// Token ids of each suffix under test (each at least 2 tokens).
    pub suffixes: Vec<Vec<u32>>,
    pub gen: GenerationConfig,
    pub seed: u64,
    /// Gain drop (baseline minus variant) beyond which a position is
    /// flagged as load-bearing. `None` disables flagging.
    pub drop_margin: Option<f64>,
}

/// One table row: a suffix with a single token removed (or the full-suffix
/// baseline when `removed_position` is `None`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub suffix_index: usize,
    pub removed_position: Option<usize>,
    pub removed_token: Option<String>,
    pub variant_text: String,
    pub mean_gain: f64,
    pub gain_std: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seed: u64,
}

/// Measures the pooled gain of every single-token-removal variant of every
/// suffix, plus a full-suffix baseline row per suffix.
pub fn run_ablation(
    backend: &dyn BlackBoxBackend,
    tokenizer: &dyn Tokenizer,
    cells: &[EvalCell<'_>],
    spec: &AblationSpec,
) -> Result<AblationReport, ExperimentError> {
    for ids in &spec.suffixes {
        if ids.len() < 2 {
            return Err(ExperimentError::SuffixTooShort(ids.len()));
        }
    }
    let mut rows = Vec::new();
    for (si, ids) in spec.suffixes.iter().enumerate() {
        let full_text = tokenizer.decode(ids);
        let baseline = gain_of(backend, cells, &full_text, spec);
        rows.push(AblationRow {
            suffix_index: si,
            removed_position: None,
            removed_token: None,
            variant_text: full_text.clone(),
            mean_gain: baseline.pooled_mean_gain,
            gain_std: baseline.gain_std,
            flagged: false,
        });
        for pos in 0..ids.len() {
            let mut variant = ids.clone();
            let removed = variant.remove(pos);
            let text = tokenizer.decode(&variant);
            let report = gain_of(backend, cells, &text, spec);
            let flagged = spec
                .drop_margin
                .map(|m| baseline.pooled_mean_gain - report.pooled_mean_gain > m)
                .unwrap_or(false);
            rows.push(AblationRow {
                suffix_index: si,
                removed_position: Some(pos),
                removed_token: tokenizer.decode_token(removed),
                variant_text: text,
                mean_gain: report.pooled_mean_gain,
                gain_std: report.gain_std,
                flagged,
            });
        }
    }
    Ok(AblationReport {
        rows,
        seed: spec.seed,
    })
}

fn gain_of(
    backend: &dyn BlackBoxBackend,
    cells: &[EvalCell<'_>],
    suffix: &str,
    spec: &AblationSpec,
) -> GainReport {
    run_gain_experiment(
        backend,
        cells,
        &GainExperimentSpec {
            suffix: Some(suffix.to_string()),
            gen: spec.gen.clone(),
            seed: spec.seed,
        },
    )
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::super::gain::tests::{essays, problem, template};
    use super::*;
    use crate::backend::stub::FnBackend;
    use crate::token::ToyTokenizer;

    fn keyed_backend() -> FnBackend<impl Fn(&str, usize) -> String + Send + Sync> {
        FnBackend::new("keyed", |prompt: &str, _| {
            if prompt.contains("user") {
                "SCORE:\n5".to_string()
            } else {
                "SCORE:\n3".to_string()
            }
        })
    }

    #[test]
    fn keyed_token_is_the_only_load_bearing_position() {
        let backend = keyed_backend();
        let mut tok = ToyTokenizer::ascii();
        // model "user" as a single token so one removal deletes the key
        let user = tok.register_special("user");
        let p = problem("p");
        let t = template("t");
        let owned = essays("p", 3);
        let cells = vec![EvalCell {
            problem: &p,
            template: &t,
            essays: owned.iter().collect(),
            examples: BTreeMap::new(),
        }];
        let suffix = vec![user, tok.id_for_byte(b' '), tok.id_for_byte(b'x')];
        let spec = AblationSpec {
            suffixes: vec![suffix],
            gen: GenerationConfig {
                sample_count: 1,
                ..Default::default()
            },
            seed: 11,
            drop_margin: Some(0.1),
        };
        let report = run_ablation(&backend, &tok, &cells, &spec).unwrap();
        assert_eq!(report.rows.len(), 4);
        let baseline = &report.rows[0];
        assert_eq!(baseline.removed_position, None);
        assert!((baseline.mean_gain - 0.4).abs() < 1e-12);
        for row in &report.rows[1..] {
            if row.removed_token.as_deref() == Some("user") {
                assert_eq!(row.mean_gain, 0.0);
                assert!(row.flagged);
            } else {
                assert!((row.mean_gain - 0.4).abs() < 1e-12);
                assert!(!row.flagged);
            }
        }
    }

    #[test]
    fn baseline_row_matches_gain_experiment() {
        let backend = keyed_backend();
        let tok = ToyTokenizer::ascii();
        let p = problem("p");
        let t = template("t");
        let owned = essays("p", 3);
        let cells = vec![EvalCell {
            problem: &p,
            template: &t,
            essays: owned.iter().collect(),
            examples: BTreeMap::new(),
        }];
        let ids = crate::token::Tokenizer::encode(&tok, "a user b").ids;
        let gen = GenerationConfig {
            sample_count: 1,
            ..Default::default()
        };
        let spec = AblationSpec {
            suffixes: vec![ids.clone()],
            gen: gen.clone(),
            seed: 11,
            drop_margin: None,
        };
        let report = run_ablation(&backend, &tok, &cells, &spec).unwrap();
        let direct = run_gain_experiment(
            &backend,
            &cells,
            &GainExperimentSpec {
                suffix: Some("a user b".into()),
                gen,
                seed: 11,
            },
        );
        assert_eq!(report.rows[0].mean_gain, direct.pooled_mean_gain);
        assert_eq!(report.rows[0].gain_std, direct.gain_std);
    }

    #[test]
    fn single_token_suffix_rejected() {
        let backend = keyed_backend();
        let tok = ToyTokenizer::ascii();
        let spec = AblationSpec {
            suffixes: vec![vec![5]],
            gen: GenerationConfig::default(),
            seed: 0,
            drop_margin: None,
        };
        assert!(matches!(
            run_ablation(&backend, &tok, &[], &spec),
            Err(ExperimentError::SuffixTooShort(1))
        ));
    }
}
