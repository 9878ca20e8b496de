//! Seven-component grading prompt templates and rendering.
//!
//! Every rendered prompt contains, in order: role declaration, rubric
//! guidelines, format specification, essay problem statement (with the
//! anonymization remark), example essays, the delimited essay under
//! evaluation, and a task restatement. The adversarial suffix, when present,
//! is appended to the essay text inside the delimiters, separated by a
//! single space.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::problem::{EssayProblem, EssayRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerField {
    pub name: String,
    pub instruction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterStyle {
    Backticks,
    StartEndTags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub role_declaration: String,
    /// "Score" or "Grade"; controls rubric and example phrasing.
    pub score_word: String,
    pub fields: Vec<AnswerField>,
    pub delimiter_style: DelimiterStyle,
    /// e.g. "Prompt to students"
    pub prompt_lead: String,
    pub remark: String,
    pub restatement: String,
    pub include_examples: bool,
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no example essay for score {0}")]
    MissingExampleForScore(i32),
    #[error("example essay {0} equals the evaluated essay")]
    ExampleEqualsTarget(String),
    #[error("template file: {0}")]
    Io(#[from] std::io::Error),
    #[error("template parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("template {0} has no answer fields")]
    NoFields(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template_id: String,
    pub problem_id: String,
    pub essay_id: String,
    pub suffix: Option<String>,
    /// One example essay id per possible score.
    pub example_essay_ids: BTreeMap<i32, String>,
    pub rendered_text: String,
    /// Byte range of the essay (including the suffix) in `rendered_text`.
    pub essay_span: Range<usize>,
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, RenderError> {
        let t: PromptTemplate = toml::from_str(text)?;
        if t.fields.is_empty() {
            return Err(RenderError::NoFields(t.template_id));
        }
        Ok(t)
    }

    /// Label of the final answer field, e.g. `SCORE:`.
    pub fn final_label(&self) -> String {
        format!("{}:", self.fields.last().expect("validated").name)
    }

    fn score_word_lower(&self) -> String {
        self.score_word.to_lowercase()
    }
}

/// Renders the full grading prompt. The skeleton outside the substituted
/// slots is byte-identical across inputs for a fixed template.
pub fn render_prompt(
    template: &PromptTemplate,
    problem: &EssayProblem,
    essay: &EssayRecord,
    examples: &BTreeMap<i32, &EssayRecord>,
    suffix: Option<&str>,
) -> Result<PromptBundle, RenderError> {
    let mut example_ids = BTreeMap::new();
    if template.include_examples {
        for s in problem.scores() {
            let ex = examples
                .get(&s)
                .ok_or(RenderError::MissingExampleForScore(s))?;
            if ex.essay_id == essay.essay_id || ex.text == essay.text {
                return Err(RenderError::ExampleEqualsTarget(ex.essay_id.clone()));
            }
            example_ids.insert(s, ex.essay_id.clone());
        }
    }

    let word = &template.score_word;
    let word_lower = template.score_word_lower();
    let mut out = String::new();

    // 1. role declaration
    out.push_str(&template.role_declaration);
    out.push_str("\n\n");

    // 2. rubric guidelines
    out.push_str("Here are the guidelines you should obey:\n\n");
    for s in problem.scores() {
        let criteria = problem.criteria_for(s).expect("validated rubric");
        out.push_str(&format!(
            "- You should give {word} {s} to an essay if it is: {criteria}\n\n"
        ));
    }

    // 3. format specification
    out.push_str("Respond in the following format:\n\n");
    for f in &template.fields {
        out.push_str(&format!("{}:\n\n<{}>\n\n", f.name, f.name));
    }
    for f in &template.fields {
        let instruction = f
            .instruction
            .replace("{min_score}", &problem.score_min.to_string())
            .replace("{max_score}", &problem.score_max.to_string());
        out.push_str(&instruction);
        out.push_str("\n\n");
    }

    // 4. essay problem statement, with the anonymization remark
    out.push_str(&format!("{}:\n\n", template.prompt_lead));
    out.push_str(&format!("```\n\n{}\n\n```\n\n", problem.statement));
    out.push_str(&format!("Remark:\n\n{}\n\n", template.remark));

    // 5. example essays, one per possible score
    if template.include_examples {
        out.push_str(&format!(
            "Here are examples of student's essays with different {word_lower}s.\n\n"
        ));
        for s in problem.scores() {
            let ex = examples.get(&s).expect("checked above");
            out.push_str(&format!(
                "- An essay with {word_lower} {s}: {}\n\n",
                ex.text
            ));
        }
    }

    // 6. delimited essay under evaluation
    out.push_str("Here is the essay to evaluate:\n\n");
    let (open, close) = match template.delimiter_style {
        DelimiterStyle::Backticks => ("```\n\n", "\n\n```\n\n"),
        DelimiterStyle::StartEndTags => ("[START OF ESSAY]\n\n", "\n\n[END OF ESSAY]\n\n"),
    };
    out.push_str(open);
    let essay_start = out.len();
    out.push_str(&essay.text);
    if let Some(sfx) = suffix {
        out.push(' ');
        out.push_str(sfx);
    }
    let essay_end = out.len();
    out.push_str(close);

    // 7. task restatement (sandwich)
    out.push_str(&template.restatement);

    Ok(PromptBundle {
        template_id: template.template_id.clone(),
        problem_id: problem.problem_id.clone(),
        essay_id: essay.essay_id.clone(),
        suffix: suffix.map(|s| s.to_string()),
        example_essay_ids: example_ids,
        rendered_text: out,
        essay_span: essay_start..essay_end,
    })
}
