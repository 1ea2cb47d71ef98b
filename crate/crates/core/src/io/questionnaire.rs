//! Questionnaire text format.
//!
//! ```text
//! # comment
//! [question-id] single|multi
//! text: the question as asked
//! option-id = weight
//! ```
//!
//! Blank lines and `#` comments are ignored. Option weights lie in
//! [0, 1]; the schema rules (unique ids, single-choice weight structure)
//! are enforced by [`Questionnaire::new`] after parsing.

use crate::error::{Error, Result};
use crate::survey::{Question, QuestionKind, QuestionOption, Questionnaire};
use std::path::Path;

/// The questionnaire shipped with the crate: thirteen single-choice
/// maternal-health questions followed by nine weighted multi-choice ones.
pub const DEFAULT_QUESTIONNAIRE_TEXT: &str = include_str!("../../data/questionnaire.txt");

pub fn default_questionnaire() -> Questionnaire {
    parse_questionnaire(DEFAULT_QUESTIONNAIRE_TEXT, "embedded questionnaire")
        .expect("the embedded questionnaire is well-formed")
}

pub fn load_questionnaire(path: &Path) -> Result<Questionnaire> {
    let text = super::read_file(path)?;
    parse_questionnaire(&text, &super::display(path))
}

/// Parse questionnaire text; `origin` names the source in errors.
pub fn parse_questionnaire(text: &str, origin: &str) -> Result<Questionnaire> {
    let mut questions: Vec<Question> = Vec::new();
    let mut current: Option<Question> = None;

    for (number, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let fail = |message: String| -> Error {
            Error::format(origin, format!("line {}: {message}", number + 1))
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let (id, tail) = rest
                .split_once(']')
                .ok_or_else(|| fail("question header is missing the closing bracket".into()))?;
            let kind = QuestionKind::parse(tail.trim()).map_err(|e| fail(e.to_string()))?;
            questions.extend(current.take());
            current = Some(Question {
                question_id: id.trim().to_string(),
                kind,
                text: String::new(),
                options: Vec::new(),
            });
        } else if let Some(rest) = line.strip_prefix("text:") {
            let question = current
                .as_mut()
                .ok_or_else(|| fail("text line before any question header".into()))?;
            if !question.text.is_empty() {
                return Err(fail(format!(
                    "question {} already has a text line",
                    question.question_id
                )));
            }
            question.text = rest.trim().to_string();
        } else if let Some((id, weight)) = line.split_once('=') {
            let question = current
                .as_mut()
                .ok_or_else(|| fail("option line before any question header".into()))?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| fail(format!("option weight {:?} is not a number", weight.trim())))?;
            question.options.push(QuestionOption {
                option_id: id.trim().to_string(),
                weight,
            });
        } else {
            return Err(fail(format!(
                "expected a question header, text line, or option, got {line:?}"
            )));
        }
    }
    questions.extend(current.take());

    for question in &questions {
        if question.text.is_empty() {
            return Err(Error::format(
                origin,
                format!("question {} has no text line", question.question_id),
            ));
        }
    }
    Questionnaire::new(questions).map_err(|e| Error::format(origin, e.to_string()))
}
