//! Held-out score-gain measurement.
//!
//! Evaluation cells are (problem, template) pairs; the held-out protocol
//! uses problems and templates disjoint from those seen during suffix
//! optimization. Per-essay failures are recorded in the report rather than
//! aborting the run.

use serde::{Deserialize, Serialize};

use crate::backend::{BlackBoxBackend, GenerationConfig};
use crate::harness::gain::{measure_gain_rows, EssayGainRow, EvalCell, GainFailure};

/// Configuration of one gain experiment over a fixed set of cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainExperimentSpec {
    /// Adversarial suffix appended to every essay; `None` measures the
    /// no-op baseline (all gains zero).
    pub suffix: Option<String>,
    pub gen: GenerationConfig,
    pub seed: u64,
}

/// Per-cell mean of normalized gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub problem_id: String,
    pub template_id: String,
    pub mean_gain: f64,
    pub essay_count: usize,
}

/// Full result of a gain experiment.
///
/// `pooled_mean_gain` follows the two-stage averaging scheme: essays are
/// averaged within each cell, then cell means are averaged with equal
/// weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainReport {
    pub suffix: Option<String>,
    pub seed: u64,
    pub rows: Vec<EssayGainRow>,
    pub failures: Vec<GainFailure>,
    pub cell_means: Vec<CellMean>,
    pub pooled_mean_gain: f64,
    pub gain_std: f64,
}

/// Grades every essay with and without the suffix under paired per-essay
/// seeds and assembles cell and pooled statistics.
pub fn run_gain_experiment(
    backend: &dyn BlackBoxBackend,
    cells: &[EvalCell<'_>],
    spec: &GainExperimentSpec,
) -> GainReport {
    let rows = measure_gain_rows(
        backend,
        cells,
        spec.suffix.as_deref(),
        &spec.gen,
        spec.seed,
    );
    let mut cell_means: Vec<CellMean> = rows
        .cell_means()
        .into_iter()
        .map(|((problem_id, template_id), mean_gain)| {
            let essay_count = rows
                .rows
                .iter()
                .filter(|r| r.problem_id == problem_id && r.template_id == template_id)
                .count();
            CellMean {
                problem_id,
                template_id,
                mean_gain,
                essay_count,
            }
        })
        .collect();
    cell_means.sort_by(|a, b| {
        (&a.problem_id, &a.template_id).cmp(&(&b.problem_id, &b.template_id))
    });
    GainReport {
        suffix: spec.suffix.clone(),
        seed: spec.seed,
        pooled_mean_gain: rows.pooled_mean(),
        gain_std: rows.gain_std(),
        cell_means,
        rows: rows.rows,
        failures: rows.failures,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::backend::stub::FnBackend;
    use crate::harness::problem::{EssayProblem, EssayRecord};
    use crate::harness::template::{AnswerField, DelimiterStyle, PromptTemplate};

    pub(crate) fn problem(id: &str) -> EssayProblem {
        EssayProblem::new(
            id,
            "statement",
            (1..=6).map(|s| (s, format!("c{s}"))).collect(),
            1,
            6,
            "d",
        )
        .unwrap()
    }

    pub(crate) fn template(id: &str) -> PromptTemplate {
        PromptTemplate {
            template_id: id.into(),
            role_declaration: "Role.".into(),
            score_word: "Score".into(),
            fields: vec![AnswerField {
                name: "SCORE".into(),
                instruction: "inst".into(),
            }],
            delimiter_style: DelimiterStyle::Backticks,
            prompt_lead: "Prompt to students".into(),
            remark: "remark".into(),
            restatement: "restate".into(),
            include_examples: false,
        }
    }

    pub(crate) fn essays(problem_id: &str, n: usize) -> Vec<EssayRecord> {
        (0..n)
            .map(|i| EssayRecord {
                essay_id: format!("e{i}"),
                problem_id: problem_id.into(),
                text: format!("essay {i}"),
                human_score: 3.0,
            })
            .collect()
    }

    #[test]
    fn plus_one_stub_gives_pooled_gain_point_two() {
        let backend = FnBackend::new("keyed", |prompt: &str, _| {
            if prompt.contains("MAGIC") {
                "SCORE:\n4".to_string()
            } else {
                "SCORE:\n3".to_string()
            }
        });
        let p = problem("p");
        let t = template("t");
        let owned = essays("p", 5);
        let cells = vec![EvalCell {
            problem: &p,
            template: &t,
            essays: owned.iter().collect(),
            examples: BTreeMap::new(),
        }];
        let spec = GainExperimentSpec {
            suffix: Some("MAGIC".into()),
            gen: GenerationConfig {
                sample_count: 1,
                ..Default::default()
            },
            seed: 3,
        };
        let report = run_gain_experiment(&backend, &cells, &spec);
        assert!(report.failures.is_empty());
        assert_eq!(report.rows.len(), 5);
        // +1 on a 1..=6 range is a normalized gain of 1/5
        assert!((report.pooled_mean_gain - 0.2).abs() < 1e-12);
        assert_eq!(report.cell_means.len(), 1);
        assert_eq!(report.cell_means[0].essay_count, 5);

        let baseline = run_gain_experiment(
            &backend,
            &cells,
            &GainExperimentSpec {
                suffix: None,
                ..spec
            },
        );
        assert!(baseline.rows.iter().all(|r| r.gain == 0.0));
        assert_eq!(baseline.pooled_mean_gain, 0.0);
    }

    #[test]
    fn pooled_mean_is_mean_of_cell_means() {
        // Unbalanced cells: the keyed stub lifts scores only for problem pa,
        // so naive per-essay pooling would weight pa's many essays more.
        let backend = FnBackend::new("keyed", |prompt: &str, _| {
            if prompt.contains("MAGIC") && prompt.contains("pa statement") {
                "SCORE:\n4".to_string()
            } else {
                "SCORE:\n3".to_string()
            }
        });
        let mut pa = problem("pa");
        pa.statement = "pa statement".into();
        let pb = problem("pb");
        let t = template("t");
        let ea = essays("pa", 4);
        let eb = essays("pb", 1);
        let cells = vec![
            EvalCell {
                problem: &pa,
                template: &t,
                essays: ea.iter().collect(),
                examples: BTreeMap::new(),
            },
            EvalCell {
                problem: &pb,
                template: &t,
                essays: eb.iter().collect(),
                examples: BTreeMap::new(),
            },
        ];
        let report = run_gain_experiment(
            &backend,
            &cells,
            &GainExperimentSpec {
                suffix: Some("MAGIC".into()),
                gen: GenerationConfig {
                    sample_count: 1,
                    ..Default::default()
                },
                seed: 3,
            },
        );
        // cell means are 0.2 and 0.0; naive pooling over 5 essays gives 0.16
        assert!((report.pooled_mean_gain - 0.1).abs() < 1e-12);
        let naive =
            report.rows.iter().map(|r| r.gain).sum::<f64>() / report.rows.len() as f64;
        assert!((naive - 0.16).abs() < 1e-12);
    }
}
