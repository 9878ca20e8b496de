//! Score parsing, empirical score distributions, and alignment metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::problem::EssayProblem;
use super::template::{PromptBundle, PromptTemplate};
use crate::backend::{BackendError, BlackBoxBackend, GenerationConfig};
use crate::util::pearson;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("all {0} samples were discarded; the grader ignored the format")]
    AllSamplesDiscarded(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("degenerate input: all human scores are equal")]
    DegenerateInput,
}

/// Empirical distribution over a problem's integer score range, built from
/// repeated sampling. Out-of-range or unparseable outputs are discarded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub problem_id: String,
    pub counts: BTreeMap<i32, u32>,
    pub n_valid: u32,
    pub n_discarded: u32,
}

impl ScoreDistribution {
    pub fn from_scores(problem_id: &str, scores: &[Option<i32>]) -> Self {
        let mut counts = BTreeMap::new();
        let mut n_valid = 0;
        let mut n_discarded = 0;
        for s in scores {
            match s {
                Some(v) => {
                    *counts.entry(*v).or_insert(0) += 1;
                    n_valid += 1;
                }
                None => n_discarded += 1,
            }
        }
        Self {
            problem_id: problem_id.to_string(),
            counts,
            n_valid,
            n_discarded,
        }
    }

    /// Probability-weighted average score; can be non-integer.
    pub fn mean(&self) -> f64 {
        if self.n_valid == 0 {
            return f64::NAN;
        }
        self.counts
            .iter()
            .map(|(&s, &c)| s as f64 * c as f64)
            .sum::<f64>()
            / self.n_valid as f64
    }

    /// Probability vector over the problem's score range.
    pub fn probabilities(&self, problem: &EssayProblem) -> Vec<f64> {
        problem
            .scores()
            .map(|s| {
                self.counts.get(&s).copied().unwrap_or(0) as f64 / self.n_valid.max(1) as f64
            })
            .collect()
    }
}

/// Extracts the integer following the template's final answer field label.
/// Uses the last occurrence of the label (models often restate labels; the
/// last one is the final answer), tolerating surrounding whitespace and
/// markdown emphasis. Returns `None` (discard) when absent, non-integer, or
/// outside the problem's range.
pub fn parse_score(
    output_text: &str,
    template: &PromptTemplate,
    problem: &EssayProblem,
) -> Option<i32> {
    let label = template.final_label();
    let idx = output_text.rfind(&label)?;
    let rest = &output_text[idx + label.len()..];
    let trimmed = rest.trim_start_matches(|c: char| c.is_whitespace() || "*_#`".contains(c));
    let mut digits = String::new();
    for (i, c) in trimmed.char_indices() {
        if i == 0 && c == '-' {
            digits.push(c);
        } else if c.is_ascii_digit() {
            digits.push(c);
        } else {
            break;
        }
    }
    let value: i32 = digits.parse().ok()?;
    if value < problem.score_min || value > problem.score_max {
        return None;
    }
    Some(value)
}

/// Samples the grader and parses every output into an empirical distribution.
pub fn score_distribution(
    backend: &dyn BlackBoxBackend,
    bundle: &PromptBundle,
    template: &PromptTemplate,
    problem: &EssayProblem,
    config: &GenerationConfig,
) -> Result<ScoreDistribution, ScoreError> {
    assert!(config.sample_count >= 1);
    let samples = backend.generate(&bundle.rendered_text, config)?;
    let scores: Vec<Option<i32>> = samples
        .iter()
        .map(|s| parse_score(s, template, problem))
        .collect();
    let dist = ScoreDistribution::from_scores(&problem.problem_id, &scores);
    if dist.n_valid == 0 {
        return Err(ScoreError::AllSamplesDiscarded(config.sample_count));
    }
    Ok(dist)
}

/// `(with - without) / (score_max - score_min)`.
pub fn normalized_score_gain(with_suffix: f64, without_suffix: f64, problem: &EssayProblem) -> f64 {
    (with_suffix - without_suffix) / problem.score_range()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean LLM score for essays sharing each human score.
    pub bucket_means: Vec<(f64, f64)>,
    pub pearson_r: f64,
    pub n: usize,
}

/// Per-human-score means of LLM scores plus Pearson correlation over all
/// (llm, human) pairs. Keys of the two maps must match.
pub fn alignment_report(
    llm_scores: &BTreeMap<String, f64>,
    human_scores: &BTreeMap<String, f64>,
) -> Result<AlignmentReport, ScoreError> {
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (id, &h) in human_scores {
        if let Some(&l) = llm_scores.get(id) {
            pairs.push((h, l));
        }
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|(h, _)| *h).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ScoreError::DegenerateInput);
    }
    let bucket_means = distinct
        .iter()
        .map(|&h| {
            let bucket: Vec<f64> = pairs
                .iter()
                .filter(|(ph, _)| *ph == h)
                .map(|(_, l)| *l)
                .collect();
            (h, bucket.iter().sum::<f64>() / bucket.len() as f64)
        })
        .collect();
    let hs: Vec<f64> = pairs.iter().map(|(h, _)| *h).collect();
    let ls: Vec<f64> = pairs.iter().map(|(_, l)| *l).collect();
    Ok(AlignmentReport {
        bucket_means,
        pearson_r: pearson(&ls, &hs),
        n: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::stub::ScriptedBackend;
    use crate::harness::problem::EssayRecord;
    use crate::harness::template::{render_prompt, AnswerField, DelimiterStyle};

    fn problem(min: i32, max: i32) -> EssayProblem {
        EssayProblem::new(
            "p",
            "statement",
            (min..=max).map(|s| (s, format!("c{s}"))).collect(),
            min,
            max,
            "d",
        )
        .unwrap()
    }

    fn template(last_field: &str) -> PromptTemplate {
        PromptTemplate {
            template_id: "t".into(),
            role_declaration: "Role.".into(),
            score_word: "Score".into(),
            fields: vec![AnswerField {
                name: last_field.into(),
                instruction: "inst".into(),
            }],
            delimiter_style: DelimiterStyle::Backticks,
            prompt_lead: "Prompt to students".into(),
            remark: "remark".into(),
            restatement: "restate".into(),
            include_examples: false,
        }
    }

    #[test]
    fn parses_labelled_scores() {
        let t = template("SCORE");
        let p = problem(1, 6);
        assert_eq!(parse_score("THOUGHT:\n ok\nSCORE:\n4", &t, &p), Some(4));
        assert_eq!(parse_score("**SCORE:** 5", &t, &p), Some(5));
        assert_eq!(parse_score("SCORE: 2\n...\nSCORE: 6", &t, &p), Some(6));
        assert_eq!(parse_score("no structured answer", &t, &p), None);
    }

    #[test]
    fn out_of_range_is_discarded() {
        let t = template("GRADE");
        let p = problem(0, 3);
        assert_eq!(parse_score("GRADE:\n9", &t, &p), None);
        assert_eq!(parse_score("GRADE:\n-1", &t, &p), None);
        assert_eq!(parse_score("GRADE:\n3", &t, &p), Some(3));
    }

    fn bundle(t: &PromptTemplate, p: &EssayProblem) -> PromptBundle {
        let e = EssayRecord {
            essay_id: "e".into(),
            problem_id: "p".into(),
            text: "text".into(),
            human_score: 1.0,
        };
        render_prompt(t, p, &e, &BTreeMap::new(), None).unwrap()
    }

    #[test]
    fn distribution_from_constant_stub() {
        let t = template("SCORE");
        let p = problem(1, 6);
        let b = bundle(&t, &p);
        let backend = ScriptedBackend::constant("stub", "SCORE:\n3");
        let cfg = GenerationConfig {
            sample_count: 8,
            ..Default::default()
        };
        let dist = score_distribution(&backend, &b, &t, &p, &cfg).unwrap();
        assert_eq!(dist.counts.get(&3), Some(&8));
        assert_eq!(dist.mean(), 3.0);
    }

    #[test]
    fn alternating_valid_invalid() {
        let t = template("SCORE");
        let p = problem(1, 6);
        let b = bundle(&t, &p);
        let backend = ScriptedBackend::new("stub", vec!["SCORE:\n2".into(), "junk".into()]);
        let cfg = GenerationConfig {
            sample_count: 8,
            ..Default::default()
        };
        let dist = score_distribution(&backend, &b, &t, &p, &cfg).unwrap();
        assert_eq!(dist.n_valid, 4);
        assert_eq!(dist.n_discarded, 4);
    }

    #[test]
    fn all_discarded_is_an_error() {
        let t = template("SCORE");
        let p = problem(1, 6);
        let b = bundle(&t, &p);
        let backend = ScriptedBackend::constant("stub", "nothing");
        let cfg = GenerationConfig {
            sample_count: 4,
            ..Default::default()
        };
        assert!(matches!(
            score_distribution(&backend, &b, &t, &p, &cfg),
            Err(ScoreError::AllSamplesDiscarded(4))
        ));
    }

    #[test]
    fn gain_formula() {
        let p16 = problem(1, 6);
        let p03 = problem(0, 3);
        assert!((normalized_score_gain(5.0, 3.0, &p16) - 0.4).abs() < 1e-12);
        assert_eq!(normalized_score_gain(2.0, 2.0, &p16), 0.0);
        assert!((normalized_score_gain(0.0, 3.0, &p03) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_identity_and_constant() {
        let human: BTreeMap<String, f64> =
            [("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 2.0)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect();
        let report = alignment_report(&human, &human).unwrap();
        assert!((report.pearson_r - 1.0).abs() < 1e-12);
        for (k, m) in &report.bucket_means {
            assert_eq!(k, m);
        }
        let constant: BTreeMap<String, f64> =
            human.keys().map(|k| (k.clone(), 4.0)).collect();
        let r2 = alignment_report(&constant, &human).unwrap();
        assert_eq!(r2.pearson_r, 0.0);
        // all humans equal -> degenerate
        let same: BTreeMap<String, f64> = human.keys().map(|k| (k.clone(), 2.0)).collect();
        assert!(matches!(
            alignment_report(&human, &same),
            Err(ScoreError::DegenerateInput)
        ));
    }
}
