//! Bundled prompt templates (versioned assets).

use std::sync::OnceLock;

use serde::Deserialize;

use crate::chart_spec::ChartSpec;

pub const PROMPT_VERSION: &str = "v1";

const COT: &str = include_str!("../assets/prompts/cot.txt");
const COT_EXAMPLE: &str = include_str!("../assets/prompts/cot_example.json");
const CODE_EDIT: &str = include_str!("../assets/prompts/code_edit.txt");
const MATCH_STYLE: &str = include_str!("../assets/prompts/match_style.txt");
const REVIEW: &str = include_str!("../assets/prompts/review.txt");
const INSTRUCTIONS: &str = include_str!("../assets/prompts/instructions.json");

const CODE_EDIT_EXAMPLE: &str = "Instruction: Locate the legend entry \"Domestic\".\n\
Modified code: the same JSON document with the series name \"Domestic\" replaced by \"Domestic@\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptTemplate {
    Cot,
    CodeEdit,
    Review,
    MatchStyle,
}

impl PromptTemplate {
    pub fn id(self) -> &'static str {
        match self {
            PromptTemplate::Cot => "cot/v1",
            PromptTemplate::CodeEdit => "code_edit/v1",
            PromptTemplate::Review => "review/v1",
            PromptTemplate::MatchStyle => "match_style/v1",
        }
    }
}

pub fn cot_example() -> &'static str {
    COT_EXAMPLE.trim_end()
}

pub fn cot_prompt(spec: &ChartSpec) -> String {
    COT.replace("{{example}}", cot_example())
        .replace("{{chart}}", &spec.to_json())
}

pub fn code_edit_prompt(spec: &ChartSpec, instruction: &str) -> String {
    CODE_EDIT
        .replace("{{example}}", CODE_EDIT_EXAMPLE)
        .replace("{{instruction}}", instruction.trim_end_matches('.'))
        .replace("{{chart}}", &spec.to_json())
}

pub fn match_style_prompt(question: &str) -> String {
    MATCH_STYLE.replace("{{question}}", question.trim_end_matches('.'))
}

pub fn review_prompt(spec: &ChartSpec, question: &str, answer: &str) -> String {
    REVIEW
        .replace("{{chart}}", &spec.to_json())
        .replace("{{question}}", question)
        .replace("{{answer}}", answer)
}

/// Contents of the first fenced code block in `prompt`.
pub fn extract_code_block(prompt: &str) -> Option<&str> {
    let start = prompt.find("```")?;
    let after = &prompt[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim())
}

/// Fixed per-type instruction strings.
#[derive(Debug, Clone, Deserialize)]
pub struct InstructionTemplates {
    pub version: String,
    pub t1a: String,
    pub t1b: String,
    pub t2: String,
    pub t3: String,
    pub t4: String,
    pub question_prefix: String,
    pub steps_header: String,
    pub answer_prefix: String,
}

pub fn instruction_templates() -> &'static InstructionTemplates {
    static T: OnceLock<InstructionTemplates> = OnceLock::new();
    T.get_or_init(|| serde_json::from_str(INSTRUCTIONS).expect("bundled instruction templates parse"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart_spec::parse_spec;

    #[test]
    fn cot_prompt_embeds_spec_in_code_slot() {
        let spec = parse_spec(
            r#"{"id":"c9","chart_type":"bar","title":"T","series":[{"name":"S","values":[1.0,2.0]}],
            "x_labels":["a","b"],"canvas":[640,480],"style_seed":0,"legend":false,"value_labels":false}"#,
        )
        .unwrap();
        let p = cot_prompt(&spec);
        assert!(!p.contains("{{"));
        assert!(p.contains("\"Grounding\" or \"Reasoning\""));
        assert_eq!(parse_spec(extract_code_block(&p).unwrap()).unwrap(), spec);
        assert_eq!(instruction_templates().version, PROMPT_VERSION);
    }

    #[test]
    fn match_prompt_slots() {
        let p = match_style_prompt("What is the value in 2018?");
        assert!(p.ends_with("Question: What is the value in 2018?.\n"));
        assert!(p.contains(r"\box{answer}"));
    }
}
