//! Trial log persistence: one JSON event per line, in the order the
//! events were recorded. Reading replays the events through the log's
//! own invariant checks, so a corrupted or reordered file is rejected.

use crate::error::{Error, Result};
use crate::trial::{LogEvent, TrialLog};
use std::io::{BufRead, Write};
use std::path::Path;

pub fn write_trial_log(path: &Path, log: &TrialLog) -> Result<()> {
    let mut writer = super::create(path)?;
    for event in log.events() {
        serde_json::to_writer(&mut writer, event)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io(super::display(path), e))?;
    }
    writer.flush().map_err(|e| Error::io(super::display(path), e))
}

pub fn read_trial_log(path: &Path) -> Result<TrialLog> {
    let reader = super::open(path)?;
    let mut events = Vec::new();
    for (number, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(super::display(path), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: LogEvent = serde_json::from_str(&line).map_err(|e| {
            Error::format(
                super::display(path),
                format!("line {}: {e}", number + 1),
            )
        })?;
        events.push(event);
    }
    TrialLog::from_events(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Arm, BeneficiaryId};

    fn small_log() -> TrialLog {
        let events = vec![
            LogEvent::Assigned {
                week: 5,
                cohort_id: 1,
                beneficiary_id: BeneficiaryId(0),
                arm: Arm::Intervention,
                stratum: "g5:01".into(),
            },
            LogEvent::Assigned {
                week: 5,
                cohort_id: 1,
                beneficiary_id: BeneficiaryId(1),
                arm: Arm::Control,
                stratum: "g5:01".into(),
            },
            LogEvent::Scheduled {
                week: 6,
                cohort_id: 1,
                arm: Arm::Intervention,
                beneficiary_id: BeneficiaryId(0),
                state: 1,
                index: 0.25,
            },
            LogEvent::Pickup {
                week: 6,
                beneficiary_id: BeneficiaryId(0),
                answered: true,
            },
        ];
        TrialLog::from_events(events).unwrap()
    }

    #[test]
    fn log_round_trips_through_ndjson() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trial_log.ndjson");
        let log = small_log();
        write_trial_log(&path, &log).unwrap();
        let loaded = read_trial_log(&path).unwrap();
        assert_eq!(loaded.events(), log.events());
        assert_eq!(loaded.arm_of(BeneficiaryId(0)), Some(Arm::Intervention));
        assert!(loaded.picked_up(BeneficiaryId(0)));

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), log.events().len());
        assert!(text.lines().next().unwrap().contains("\"event\""));
    }

    #[test]
    fn tampered_logs_are_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trial_log.ndjson");
        write_trial_log(&path, &small_log()).unwrap();

        // Duplicating the scheduling line breaks the one-intervention rule.
        let text = std::fs::read_to_string(&path).unwrap();
        let scheduled = text
            .lines()
            .find(|l| l.contains("\"scheduled\""))
            .unwrap()
            .to_string();
        std::fs::write(&path, format!("{text}{scheduled}\n")).unwrap();
        assert!(read_trial_log(&path).is_err());

        // Garbage JSON points at its line number.
        std::fs::write(&path, "{\"event\":\"assigned\"").unwrap();
        let err = read_trial_log(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
