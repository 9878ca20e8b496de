//! Grading harness: prompt construction, score parsing, distributions, and
//! gain/alignment metrics.

pub mod gain;
pub mod problem;
pub mod score;
pub mod template;

pub use gain::{average_gain, measure_gain_rows, EssayGainRow, EvalCell, GainRows};
pub use problem::{load_problems, EssayProblem, EssayRecord, ProblemError};
pub use score::{
    alignment_report, normalized_score_gain, parse_score, score_distribution, AlignmentReport,
    ScoreDistribution, ScoreError,
};
pub use template::{
    render_prompt, AnswerField, DelimiterStyle, PromptBundle, PromptTemplate, RenderError,
};
