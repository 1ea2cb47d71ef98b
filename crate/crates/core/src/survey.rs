//! Post-program health-knowledge questionnaire: schema and scoring.
//!
//! Questions are single-choice (the selected option's weight is the score)
//! or multi-choice (sum of selected weights, normalised by the total
//! weight of the full-credit options and clamped to one). Full-credit
//! options are those carrying the question's maximum weight; partial
//! options carry strictly smaller positive weights.

use crate::error::{Error, Result};
use crate::types::BeneficiaryId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

const WEIGHT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    SingleChoice,
    MultiChoice,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::SingleChoice => "single",
            QuestionKind::MultiChoice => "multi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(QuestionKind::SingleChoice),
            "multi" => Ok(QuestionKind::MultiChoice),
            other => Err(Error::validation(format!(
                "unknown question kind {other:?}; expected \"single\" or \"multi\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOption {
    pub option_id: String,
    /// Score weight in [0, 1].
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub kind: QuestionKind,
    pub text: String,
    pub options: Vec<QuestionOption>,
}

impl Question {
    pub fn validate(&self) -> Result<()> {
        if self.question_id.is_empty() {
            return Err(Error::validation("question id must be non-empty"));
        }
        if self.options.len() < 2 {
            return Err(Error::validation(format!(
                "question {} needs at least two options",
                self.question_id
            )));
        }
        let mut seen = BTreeSet::new();
        for opt in &self.options {
            if opt.option_id.is_empty() {
                return Err(Error::validation(format!(
                    "question {} has an option with an empty id",
                    self.question_id
                )));
            }
            if !seen.insert(opt.option_id.as_str()) {
                return Err(Error::validation(format!(
                    "question {} repeats option id {}",
                    self.question_id, opt.option_id
                )));
            }
            if !opt.weight.is_finite() || opt.weight < 0.0 || opt.weight > 1.0 {
                return Err(Error::validation(format!(
                    "option {} of question {} has weight {} outside [0, 1]",
                    opt.option_id, self.question_id, opt.weight
                )));
            }
        }
        if self.full_credit_weight() <= 0.0 {
            return Err(Error::validation(format!(
                "question {} has no positively weighted option",
                self.question_id
            )));
        }
        if self.kind == QuestionKind::SingleChoice {
            let full = self
                .options
                .iter()
                .filter(|o| (o.weight - 1.0).abs() <= WEIGHT_EPSILON)
                .count();
            let zero = self
                .options
                .iter()
                .filter(|o| o.weight.abs() <= WEIGHT_EPSILON)
                .count();
            if full != 1 || full + zero != self.options.len() {
                return Err(Error::validation(format!(
                    "single-choice question {} must have exactly one weight-1 option and \
                     zero-weight alternatives",
                    self.question_id
                )));
            }
        }
        Ok(())
    }

    /// The question's maximum option weight.
    pub fn full_credit_weight(&self) -> f64 {
        self.options.iter().fold(0.0_f64, |m, o| m.max(o.weight))
    }

    /// Options carrying the maximum weight.
    pub fn full_credit_options(&self) -> impl Iterator<Item = &QuestionOption> {
        let max = self.full_credit_weight();
        self.options
            .iter()
            .filter(move |o| (o.weight - max).abs() <= WEIGHT_EPSILON)
    }

    /// Options with positive weight (partials included).
    pub fn credited_options(&self) -> impl Iterator<Item = &QuestionOption> {
        self.options.iter().filter(|o| o.weight > WEIGHT_EPSILON)
    }

    /// The score denominator: total weight across full-credit options.
    /// For single-choice questions this is just the maximum weight.
    pub fn max_attainable(&self) -> f64 {
        match self.kind {
            QuestionKind::SingleChoice => self.full_credit_weight(),
            QuestionKind::MultiChoice => self.full_credit_options().map(|o| o.weight).sum(),
        }
    }

    fn option(&self, option_id: &str) -> Result<&QuestionOption> {
        self.options
            .iter()
            .find(|o| o.option_id == option_id)
            .ok_or_else(|| {
                Error::validation(format!(
                    "question {} has no option {option_id:?}",
                    self.question_id
                ))
            })
    }
}

/// One beneficiary's answer to one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub beneficiary_id: BeneficiaryId,
    pub question_id: String,
    pub selected: BTreeSet<String>,
}

/// A scored answer, ready for the comparison tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub beneficiary_id: BeneficiaryId,
    pub question_id: String,
    pub score: f64,
}

/// Score one response against its question. Single-choice responses must
/// select exactly one known option; multi-choice scores are the selected
/// weight sum over the full-credit total, clamped to [0, 1]. An empty
/// multi-choice selection scores zero.
pub fn score_response(question: &Question, response: &SurveyResponse) -> Result<f64> {
    if response.question_id != question.question_id {
        return Err(Error::validation(format!(
            "response for question {} scored against question {}",
            response.question_id, question.question_id
        )));
    }
    match question.kind {
        QuestionKind::SingleChoice => {
            if response.selected.len() != 1 {
                return Err(Error::validation(format!(
                    "single-choice question {} got {} selections",
                    question.question_id,
                    response.selected.len()
                )));
            }
            let id = response.selected.iter().next().unwrap();
            Ok(question.option(id)?.weight)
        }
        QuestionKind::MultiChoice => {
            let mut sum = 0.0;
            for id in &response.selected {
                sum += question.option(id)?.weight;
            }
            let denom = question.max_attainable();
            Ok((sum / denom).min(1.0))
        }
    }
}

/// The full instrument: question order is the canonical output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub questions: Vec<Question>,
}

impl Questionnaire {
    pub fn new(questions: Vec<Question>) -> Result<Self> {
        let q = Questionnaire { questions };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.questions.is_empty() {
            return Err(Error::validation("questionnaire has no questions"));
        }
        let mut seen = BTreeSet::new();
        for q in &self.questions {
            q.validate()?;
            if !seen.insert(q.question_id.as_str()) {
                return Err(Error::validation(format!(
                    "questionnaire repeats question id {}",
                    q.question_id
                )));
            }
        }
        Ok(())
    }

    pub fn question(&self, question_id: &str) -> Result<&Question> {
        self.questions
            .iter()
            .find(|q| q.question_id == question_id)
            .ok_or_else(|| {
                Error::validation(format!("questionnaire has no question {question_id:?}"))
            })
    }

    /// Score a batch of responses into rows keyed (beneficiary, question).
    pub fn score_all(&self, responses: &[SurveyResponse]) -> Result<Vec<ScoreRow>> {
        let mut rows = Vec::with_capacity(responses.len());
        for r in responses {
            let question = self.question(&r.question_id)?;
            rows.push(ScoreRow {
                beneficiary_id: r.beneficiary_id,
                question_id: r.question_id.clone(),
                score: score_response(question, r)?,
            });
        }
        Ok(rows)
    }
}

/// Summary statistics for one group's scores on one question.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Standard error of the mean (zero for a single observation).
    pub se: f64,
    pub n: usize,
}

/// Mean and standard error of a score list; `None` marks an empty group
/// so downstream tables can carry an explicit insufficient-data marker
/// instead of a silent zero.
pub fn group_stats(scores: &[f64]) -> Option<GroupStats> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let se = if n < 2 {
        0.0
    } else {
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Some(GroupStats { mean, se, n })
}

/// Per-arm group statistics for one question.
pub fn question_means(
    scores_by_arm: &BTreeMap<crate::types::Arm, Vec<f64>>,
) -> BTreeMap<crate::types::Arm, Option<GroupStats>> {
    scores_by_arm
        .iter()
        .map(|(arm, scores)| (*arm, group_stats(scores)))
        .collect()
}
