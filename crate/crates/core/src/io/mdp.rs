//! Transition-model table: one probability per row, grouped by
//! beneficiary, action (0 = passive, 1 = active), and from-state. The
//! table carries only dynamics; the loader restores the engagement-arm
//! convention of reward 1 on the top state and 0 elsewhere.

use crate::bandit::ArmMdp;
use crate::error::{Error, Result};
use crate::types::BeneficiaryId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub beneficiary_id: BeneficiaryId,
    pub action: usize,
    pub from_state: usize,
    pub to_state: usize,
    pub probability: f64,
}

pub fn write_transition_models(
    path: &Path,
    models: &BTreeMap<BeneficiaryId, ArmMdp>,
) -> Result<()> {
    let mut rows = Vec::new();
    for (&beneficiary_id, mdp) in models {
        for action in 0..2 {
            for from_state in 0..mdp.n_states() {
                for (to_state, &probability) in mdp.row(action, from_state).iter().enumerate() {
                    rows.push(TransitionRow {
                        beneficiary_id,
                        action,
                        from_state,
                        to_state,
                        probability,
                    });
                }
            }
        }
    }
    super::write_csv(path, rows)
}

/// Load per-beneficiary transition models written by
/// [`write_transition_models`]. Unlisted (beneficiary, action, from, to)
/// combinations default to probability zero; each assembled model is
/// re-validated, so incomplete rows surface as errors.
pub fn read_transition_models(
    path: &Path,
    discount: f64,
) -> Result<BTreeMap<BeneficiaryId, ArmMdp>> {
    let rows: Vec<TransitionRow> = super::read_csv(path)?;
    let mut grouped: BTreeMap<BeneficiaryId, Vec<TransitionRow>> = BTreeMap::new();
    for row in rows {
        if row.action > 1 {
            return Err(Error::format(
                super::display(path),
                format!(
                    "beneficiary {}: action {} is not 0 (passive) or 1 (active)",
                    row.beneficiary_id, row.action
                ),
            ));
        }
        grouped.entry(row.beneficiary_id).or_default().push(row);
    }

    let mut models = BTreeMap::new();
    for (beneficiary_id, rows) in grouped {
        let n_states = rows
            .iter()
            .map(|r| r.from_state.max(r.to_state) + 1)
            .max()
            .expect("group is non-empty");
        let mut matrices = [
            vec![vec![0.0; n_states]; n_states],
            vec![vec![0.0; n_states]; n_states],
        ];
        for row in &rows {
            matrices[row.action][row.from_state][row.to_state] = row.probability;
        }
        let [passive, active] = matrices;
        let mut rewards = vec![0.0; n_states];
        rewards[n_states - 1] = 1.0;
        let mdp = ArmMdp::new(passive, active, rewards, discount).map_err(|e| {
            Error::format(
                super::display(path),
                format!("beneficiary {beneficiary_id}: {e}"),
            )
        })?;
        models.insert(beneficiary_id, mdp);
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_models_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.csv");
        let mut models = BTreeMap::new();
        models.insert(
            BeneficiaryId(4),
            ArmMdp::two_state(0.05, 0.9, 0.2, 0.95, 0.9).unwrap(),
        );
        models.insert(
            BeneficiaryId(9),
            ArmMdp::two_state(0.5, 0.5, 0.6, 0.7, 0.9).unwrap(),
        );
        write_transition_models(&path, &models).unwrap();
        let loaded = read_transition_models(&path, 0.9).unwrap();
        assert_eq!(loaded, models);

        let text = std::fs::read_to_string(&path).unwrap();
        // 2 members x 2 actions x 2 rows x 2 entries + header.
        assert_eq!(text.lines().count(), 17);
        assert_eq!(
            text.lines().next().unwrap(),
            "beneficiary_id,action,from_state,to_state,probability"
        );
    }

    #[test]
    fn incomplete_rows_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.csv");
        std::fs::write(
            &path,
            "beneficiary_id,action,from_state,to_state,probability\n\
             1,0,0,1,0.4\n",
        )
        .unwrap();
        let err = read_transition_models(&path, 0.9).unwrap_err().to_string();
        assert!(err.contains("beneficiary 1"), "{err}");
    }
}
