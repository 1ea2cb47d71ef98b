//! CSV row shapes for artifacts whose in-memory form is not already a
//! flat record, plus validated readers for the core tables.
//!
//! Structures that are flat records already (beneficiaries, latent
//! profiles, arm assignments, score rows, matched pairs, cumulative score
//! rows) serialize directly through [`super::write_csv`].

use crate::analyze::{ComparisonRow, GainRecord};
use crate::engagement::CallRecord;
use crate::error::{Error, Result};
use crate::survey::SurveyResponse;
use crate::trial::FunnelCounts;
use crate::types::{Arm, BeneficiaryId, Week};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Separator between option ids in a serialized multi-choice selection.
const SELECTION_SEPARATOR: char = '|';

/// Read a call-record table, validating every row.
pub fn read_calls(path: &Path) -> Result<Vec<CallRecord>> {
    let rows: Vec<CallRecord> = super::read_csv(path)?;
    for record in &rows {
        record
            .validate()
            .map_err(|e| Error::format(super::display(path), e.to_string()))?;
    }
    Ok(rows)
}

/// One survey answer as stored on disk: the selected option ids joined
/// with `|` (empty for a blank multi-choice answer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub beneficiary_id: BeneficiaryId,
    pub question_id: String,
    pub selected: String,
}

pub fn write_responses(path: &Path, responses: &[SurveyResponse]) -> Result<()> {
    let mut rows = Vec::with_capacity(responses.len());
    for response in responses {
        for id in &response.selected {
            if id.contains(SELECTION_SEPARATOR) {
                return Err(Error::validation(format!(
                    "option id {id:?} contains the selection separator {SELECTION_SEPARATOR:?} \
                     and cannot be serialized"
                )));
            }
        }
        let selected: Vec<&str> = response.selected.iter().map(String::as_str).collect();
        rows.push(ResponseRow {
            beneficiary_id: response.beneficiary_id,
            question_id: response.question_id.clone(),
            selected: selected.join(&SELECTION_SEPARATOR.to_string()),
        });
    }
    super::write_csv(path, rows)
}

pub fn read_responses(path: &Path) -> Result<Vec<SurveyResponse>> {
    let rows: Vec<ResponseRow> = super::read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|row| SurveyResponse {
            beneficiary_id: row.beneficiary_id,
            question_id: row.question_id,
            selected: row
                .selected
                .split(SELECTION_SEPARATOR)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        })
        .collect())
}

/// One member's pre/post listenership gain, tagged with their arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub beneficiary_id: BeneficiaryId,
    pub arm: Arm,
    pub intervention_week: Week,
    pub pre_avg: f64,
    pub post_avg: f64,
    pub gain: f64,
}

impl GainRow {
    pub fn new(arm: Arm, record: &GainRecord) -> Self {
        GainRow {
            beneficiary_id: record.beneficiary_id,
            arm,
            intervention_week: record.intervention_week,
            pre_avg: record.pre_avg,
            post_avg: record.post_avg,
            gain: record.gain,
        }
    }

    pub fn record(&self) -> GainRecord {
        GainRecord {
            beneficiary_id: self.beneficiary_id,
            pre_avg: self.pre_avg,
            post_avg: self.post_avg,
            gain: self.gain,
            intervention_week: self.intervention_week,
        }
    }
}

/// One week of the cumulative listenership-gain curve, per arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub week: Week,
    pub control_cumulative: f64,
    pub intervention_cumulative: f64,
}

/// Flattened across-arm comparison row; empty fields mark questions with
/// too little matched data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCsvRow {
    pub question_id: String,
    pub n_pairs: usize,
    pub control_mean: Option<f64>,
    pub control_se: Option<f64>,
    pub control_n: Option<usize>,
    pub intervention_mean: Option<f64>,
    pub intervention_se: Option<f64>,
    pub intervention_n: Option<usize>,
    pub improvement_pct: Option<f64>,
    pub p_value: Option<f64>,
}

impl From<&ComparisonRow> for ComparisonCsvRow {
    fn from(row: &ComparisonRow) -> Self {
        ComparisonCsvRow {
            question_id: row.question_id.clone(),
            n_pairs: row.n_pairs,
            control_mean: row.control.map(|g| g.mean),
            control_se: row.control.map(|g| g.se),
            control_n: row.control.map(|g| g.n),
            intervention_mean: row.intervention.map(|g| g.mean),
            intervention_se: row.intervention.map(|g| g.se),
            intervention_n: row.intervention.map(|g| g.n),
            improvement_pct: row.improvement_pct,
            p_value: row.p_value,
        }
    }
}

/// One attrition stage with per-arm member counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub stage: String,
    pub intervention: usize,
    pub control: usize,
}

impl FunnelRow {
    pub fn from_counts(funnel: &FunnelCounts) -> Vec<FunnelRow> {
        funnel
            .rows()
            .into_iter()
            .map(|(stage, intervention, control)| FunnelRow {
                stage: stage.to_string(),
                intervention,
                control,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn response(id: u64, question: &str, selected: &[&str]) -> SurveyResponse {
        SurveyResponse {
            beneficiary_id: BeneficiaryId(id),
            question_id: question.to_string(),
            selected: selected.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn responses_round_trip_including_empty_selections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.csv");
        let responses = vec![
            response(3, "cord-care", &["kept-clean-and-dry", "nothing-applied"]),
            response(3, "anemia-pill", &["iron-pill"]),
            response(7, "listen-reasons", &[]),
        ];
        write_responses(&path, &responses).unwrap();
        let loaded = read_responses(&path).unwrap();
        assert_eq!(loaded, responses);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("kept-clean-and-dry|nothing-applied"));
    }

    #[test]
    fn separator_in_an_option_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.csv");
        let bad = vec![SurveyResponse {
            beneficiary_id: BeneficiaryId(1),
            question_id: "q".into(),
            selected: BTreeSet::from(["a|b".to_string()]),
        }];
        let err = write_responses(&path, &bad).unwrap_err().to_string();
        assert!(err.contains("separator"), "{err}");
    }

    #[test]
    fn calls_round_trip_and_reject_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.csv");
        let calls = vec![
            CallRecord {
                beneficiary_id: BeneficiaryId(0),
                week: 3,
                answered: true,
                seconds_listened: 75,
            },
            CallRecord {
                beneficiary_id: BeneficiaryId(0),
                week: 4,
                answered: false,
                seconds_listened: 0,
            },
        ];
        super::super::write_csv(&path, &calls).unwrap();
        assert_eq!(read_calls(&path).unwrap(), calls);

        // An unanswered call with positive seconds violates the record
        // contract and must not load.
        std::fs::write(
            &path,
            "beneficiary_id,week,answered,seconds_listened\n1,2,false,10\n",
        )
        .unwrap();
        assert!(read_calls(&path).is_err());
    }

    #[test]
    fn optional_comparison_fields_serialize_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("score_comparison.csv");
        let rows = vec![ComparisonCsvRow {
            question_id: "night-feeding".into(),
            n_pairs: 0,
            control_mean: None,
            control_se: None,
            control_n: None,
            intervention_mean: None,
            intervention_se: None,
            intervention_n: None,
            improvement_pct: None,
            p_value: None,
        }];
        super::super::write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("night-feeding,0,,,"));
        let loaded: Vec<ComparisonCsvRow> = super::super::read_csv(&path).unwrap();
        assert_eq!(loaded, rows);
    }
}
