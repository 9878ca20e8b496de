//! Tab-separated essay dataset ingestion.
//!
//! The source format follows the ASAP automated essay scoring release: a
//! header row naming at least `essay_id`, `essay_set`, `essay`,
//! `rater1_domain1`, `rater2_domain1`, and `domain1_score`, one essay per
//! line. Essay sets are remapped to problem numbers (problem #2 is dataset
//! essay set #3 and vice versa), and problem #1's human score is resolved as
//! the mean of its two raters; the other problems use the resolved domain
//! score directly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::harness::problem::{EssayProblem, EssayRecord};

/// Maps a dataset essay-set number to the problem number used throughout the
/// toolkit, or `None` for sets outside the studied range.
pub fn paper_problem_for_essay_set(essay_set: u32) -> Option<u32> {
    match essay_set {
        1 => Some(1),
        3 => Some(2),
        2 => Some(3),
        4 => Some(4),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub ingested: usize,
    /// Rows skipped for malformed fields or out-of-range scores.
    pub skipped: usize,
    /// Rows belonging to essay sets outside the studied problems.
    pub out_of_scope: usize,
    pub skipped_examples: Vec<String>,
}

/// Essays indexed by `(problem_id, essay_id)`.
#[derive(Debug, Default)]
pub struct EssayStore {
    essays: BTreeMap<(String, String), EssayRecord>,
}

impl EssayStore {
    pub fn get(&self, problem_id: &str, essay_id: &str) -> Option<&EssayRecord> {
        self.essays
            .get(&(problem_id.to_string(), essay_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.essays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.essays.is_empty()
    }

    /// Essays of one problem in essay-id order.
    pub fn for_problem(&self, problem_id: &str) -> Vec<&EssayRecord> {
        self.essays
            .iter()
            .filter(|((p, _), _)| p == problem_id)
            .map(|(_, e)| e)
            .collect()
    }
}

/// Reads and validates a tab-separated dataset file.
///
/// `problems` supplies score ranges keyed by problem id; rows whose resolved
/// human score falls outside the problem's range are counted and skipped,
/// as are rows with missing or non-numeric fields.
pub fn ingest_dataset(
    path: &Path,
    problems: &[EssayProblem],
) -> Result<(EssayStore, IngestReport), StoreError> {
    if !path.exists() {
        return Err(StoreError::FileMissing(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, problems)
}

/// Parses dataset text already in memory; see [`ingest_dataset`].
pub fn parse_dataset(
    text: &str,
    problems: &[EssayProblem],
) -> Result<(EssayStore, IngestReport), StoreError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| StoreError::SchemaMismatch("empty file".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let col = |name: &str| -> Result<usize, StoreError> {
        cols.iter().position(|c| *c == name).ok_or_else(|| {
            StoreError::SchemaMismatch(format!("missing column {name:?} in header"))
        })
    };
    let c_id = col("essay_id")?;
    let c_set = col("essay_set")?;
    let c_text = col("essay")?;
    let c_r1 = col("rater1_domain1")?;
    let c_r2 = col("rater2_domain1")?;
    let c_score = col("domain1_score")?;

    let by_id: BTreeMap<&str, &EssayProblem> = problems
        .iter()
        .map(|p| (p.problem_id.as_str(), p))
        .collect();

    let mut store = EssayStore::default();
    let mut report = IngestReport::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let skip = |why: String, report: &mut IngestReport| {
            report.skipped += 1;
            if report.skipped_examples.len() < 10 {
                report.skipped_examples.push(format!("line {}: {why}", lineno + 2));
            }
        };
        let get = |idx: usize| fields.get(idx).map(|s| s.trim());
        let (essay_id, set, essay_text) = match (get(c_id), get(c_set), get(c_text)) {
            (Some(id), Some(set), Some(text)) if !id.is_empty() && !text.is_empty() => {
                (id, set, text)
            }
            _ => {
                skip("missing id/set/text field".into(), &mut report);
                continue;
            }
        };
        let essay_set: u32 = match set.parse() {
            Ok(v) => v,
            Err(_) => {
                skip(format!("bad essay_set {set:?}"), &mut report);
                continue;
            }
        };
        let problem_num = match paper_problem_for_essay_set(essay_set) {
            Some(p) => p,
            None => {
                report.out_of_scope += 1;
                continue;
            }
        };
        let problem_id = problem_num.to_string();
        let problem = match by_id.get(problem_id.as_str()) {
            Some(p) => *p,
            None => {
                report.out_of_scope += 1;
                continue;
            }
        };
        let parse_f64 = |idx: usize| get(idx).and_then(|s| s.parse::<f64>().ok());
        // problem #1's score is the mean of two raters; others use the
        // resolved domain score
        let human_score = if problem_num == 1 {
            match (parse_f64(c_r1), parse_f64(c_r2)) {
                (Some(a), Some(b)) => (a + b) / 2.0,
                _ => {
                    skip("missing rater score".into(), &mut report);
                    continue;
                }
            }
        } else {
            match parse_f64(c_score) {
                Some(v) => v,
                None => {
                    skip("missing domain score".into(), &mut report);
                    continue;
                }
            }
        };
        let record = EssayRecord {
            essay_id: essay_id.to_string(),
            problem_id: problem_id.clone(),
            text: essay_text.to_string(),
            human_score,
        };
        if record.validate_against(problem).is_err() {
            skip(
                format!("score {human_score} outside problem {problem_id} range"),
                &mut report,
            );
            continue;
        }
        store
            .essays
            .insert((problem_id, essay_id.to_string()), record);
        report.ingested += 1;
    }
    Ok((store, report))
}
