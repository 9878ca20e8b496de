//! Suffix gain measurement shared by the pruner and the experiment drivers.
//!
//! Within one measurement, the with-suffix and without-suffix gradings of an
//! essay share the same sampling seed, so temperature-0 runs isolate the
//! suffix's effect exactly. Pooled means follow the two-stage scheme:
//! average within each (problem, template) cell, then average cell means.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::problem::{EssayProblem, EssayRecord};
use super::score::{normalized_score_gain, score_distribution, ScoreError};
use super::template::{render_prompt, PromptTemplate};
use crate::backend::{BlackBoxBackend, GenerationConfig};
use crate::util::derive_seed;

/// One (problem, template) evaluation cell with its essays and example pool.
pub struct EvalCell<'a> {
    pub problem: &'a EssayProblem,
    pub template: &'a PromptTemplate,
    pub essays: Vec<&'a EssayRecord>,
    pub examples: BTreeMap<i32, &'a EssayRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssayGainRow {
    pub problem_id: String,
    pub template_id: String,
    pub essay_id: String,
    pub score_without: f64,
    pub score_with: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainFailure {
    pub problem_id: String,
    pub template_id: String,
    pub essay_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GainRows {
    pub rows: Vec<EssayGainRow>,
    pub failures: Vec<GainFailure>,
}

impl GainRows {
    pub fn cell_means(&self) -> BTreeMap<(String, String), f64> {
        let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = sums
                .entry((r.problem_id.clone(), r.template_id.clone()))
                .or_insert((0.0, 0));
            e.0 += r.gain;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    /// Mean of cell means (cells equally weighted).
    pub fn pooled_mean(&self) -> f64 {
        let cells = self.cell_means();
        if cells.is_empty() {
            return 0.0;
        }
        cells.values().sum::<f64>() / cells.len() as f64
    }

    /// Standard deviation over per-essay gains.
    pub fn gain_std(&self) -> f64 {
        crate::util::std_dev(&self.rows.iter().map(|r| r.gain).collect::<Vec<_>>())
    }
}

/// Grades every essay in every cell with and without the suffix under paired
/// sampling seeds. Failures are recorded per essay; surviving rows are kept.
pub fn measure_gain_rows(
    backend: &dyn BlackBoxBackend,
    cells: &[EvalCell<'_>],
    suffix: Option<&str>,
    gen: &GenerationConfig,
    seed: u64,
) -> GainRows {
    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, cell)| (0..cell.essays.len()).map(move |e| (c, e)))
        .collect();
    let results: Vec<Result<EssayGainRow, GainFailure>> = jobs
        .par_iter()
        .map(|&(c, e)| {
            let cell = &cells[c];
            let essay = cell.essays[e];
            grade_pair(backend, cell, essay, suffix, gen, seed).map_err(|err| GainFailure {
                problem_id: cell.problem.problem_id.clone(),
                template_id: cell.template.template_id.clone(),
                essay_id: essay.essay_id.clone(),
                error: err.to_string(),
            })
        })
        .collect();
    let mut out = GainRows::default();
    for r in results {
        match r {
            Ok(row) => out.rows.push(row),
            Err(f) => out.failures.push(f),
        }
    }
    out
}

fn grade_pair(
    backend: &dyn BlackBoxBackend,
    cell: &EvalCell<'_>,
    essay: &EssayRecord,
    suffix: Option<&str>,
    gen: &GenerationConfig,
    seed: u64,
) -> Result<EssayGainRow, ScoreError> {
    let essay_seed = derive_seed(
        seed,
        &[
            "grade",
            &cell.problem.problem_id,
            &cell.template.template_id,
            &essay.essay_id,
        ],
    );
    let cfg = GenerationConfig {
        random_seed: essay_seed,
        ..gen.clone()
    };
    let without = render_prompt(cell.template, cell.problem, essay, &cell.examples, None)
        .map_err(|e| ScoreError::Backend(crate::backend::BackendError::InvalidProbePoint(e.to_string())))?;
    let with = render_prompt(cell.template, cell.problem, essay, &cell.examples, suffix)
        .map_err(|e| ScoreError::Backend(crate::backend::BackendError::InvalidProbePoint(e.to_string())))?;
    let d0 = score_distribution(backend, &without, cell.template, cell.problem, &cfg)?;
    let d1 = score_distribution(backend, &with, cell.template, cell.problem, &cfg)?;
    let (m0, m1) = (d0.mean(), d1.mean());
    Ok(EssayGainRow {
        problem_id: cell.problem.problem_id.clone(),
        template_id: cell.template.template_id.clone(),
        essay_id: essay.essay_id.clone(),
        score_without: m0,
        score_with: m1,
        gain: normalized_score_gain(m1, m0, cell.problem),
    })
}

/// Convenience: pooled mean gain of a suffix over the cells.
pub fn average_gain(
    backend: &dyn BlackBoxBackend,
    cells: &[EvalCell<'_>],
    suffix: Option<&str>,
    gen: &GenerationConfig,
    seed: u64,
) -> f64 {
    measure_gain_rows(backend, cells, suffix, gen, seed).pooled_mean()
}
