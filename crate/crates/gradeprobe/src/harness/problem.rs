//! Essay problems and student essays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssayProblem {
    pub problem_id: String,
    pub statement: String,
    /// `(score, criteria)` covering every integer in `[score_min, score_max]`
    /// exactly once.
    pub rubric: Vec<(i32, String)>,
    pub score_min: i32,
    pub score_max: i32,
    pub description: String,
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("score_min {0} must be below score_max {1}")]
    EmptyRange(i32, i32),
    #[error("rubric does not cover score {0} exactly once")]
    RubricCoverage(i32),
    #[error("essay {essay_id}: human score {score} outside [{min}, {max}]")]
    ScoreOutOfRange {
        essay_id: String,
        score: f64,
        min: i32,
        max: i32,
    },
    #[error("problem file: {0}")]
    File(String),
}

impl EssayProblem {
    pub fn new(
        problem_id: &str,
        statement: &str,
        rubric: Vec<(i32, String)>,
        score_min: i32,
        score_max: i32,
        description: &str,
    ) -> Result<Self, ProblemError> {
        let p = Self {
            problem_id: problem_id.to_string(),
            statement: statement.to_string(),
            rubric,
            score_min,
            score_max,
            description: description.to_string(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.score_min >= self.score_max {
            return Err(ProblemError::EmptyRange(self.score_min, self.score_max));
        }
        for s in self.score_min..=self.score_max {
            if self.rubric.iter().filter(|(rs, _)| *rs == s).count() != 1 {
                return Err(ProblemError::RubricCoverage(s));
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> impl Iterator<Item = i32> {
        self.score_min..=self.score_max
    }

    pub fn num_scores(&self) -> usize {
        (self.score_max - self.score_min + 1) as usize
    }

    /// Overall score range, defined as `score_max - score_min`.
    pub fn score_range(&self) -> f64 {
        (self.score_max - self.score_min) as f64
    }

    pub fn criteria_for(&self, score: i32) -> Option<&str> {
        self.rubric
            .iter()
            .find(|(s, _)| *s == score)
            .map(|(_, c)| c.as_str())
    }
}

#[derive(Debug, Deserialize)]
struct ProblemFile {
    problems: Vec<EssayProblem>,
}

/// Loads and validates problem definitions from a TOML file with a
/// `[[problems]]` array.
pub fn load_problems(path: &std::path::Path) -> Result<Vec<EssayProblem>, ProblemError> {
    let text = std::fs::read_to_string(path).map_err(|e| ProblemError::File(e.to_string()))?;
    let file: ProblemFile =
        toml::from_str(&text).map_err(|e| ProblemError::File(e.to_string()))?;
    for p in &file.problems {
        p.validate()?;
    }
    Ok(file.problems)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    pub problem_id: String,
    pub text: String,
    /// Mean of rater scores when multiple raters graded the essay.
    pub human_score: f64,
}

impl EssayRecord {
    pub fn validate_against(&self, problem: &EssayProblem) -> Result<(), ProblemError> {
        if self.human_score < problem.score_min as f64
            || self.human_score > problem.score_max as f64
        {
            return Err(ProblemError::ScoreOutOfRange {
                essay_id: self.essay_id.clone(),
                score: self.human_score,
                min: problem.score_min,
                max: problem.score_max,
            });
        }
        Ok(())
    }
}
