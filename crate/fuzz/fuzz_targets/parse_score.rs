#![no_main]

use gradeprobe::harness::problem::EssayProblem;
use gradeprobe::harness::score::parse_score;
use gradeprobe::harness::template::{AnswerField, DelimiterStyle, PromptTemplate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let problem = EssayProblem::new(
        "p",
        "statement",
        (1..=6).map(|s| (s, format!("c{s}"))).collect(),
        1,
        6,
        "d",
    )
    .unwrap();
    let template = PromptTemplate {
        template_id: "t".into(),
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
    };
    if let Some(v) = parse_score(text, &template, &problem) {
        assert!((1..=6).contains(&v));
    }
});
