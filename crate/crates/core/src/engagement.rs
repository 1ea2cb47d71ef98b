//! Listening observables derived from automated-call records.
//!
//! One `CallRecord` is logged per beneficiary per week. A beneficiary is
//! *engaged at threshold T* on a call when they listened at least `T`
//! seconds; the windowed variant asks whether that happened on any call in
//! the `w` weeks before an anchor week. A grid of (threshold, window)
//! pairs plus a gestational-age bucket forms the categorical feature
//! vector used to stratify arm assignment.

use crate::error::{Error, Result};
use crate::types::{BeneficiaryId, Week, WeekRange};
use serde::{Deserialize, Serialize};

/// One automated program call.
///
/// `seconds_listened` is zero whenever the call was not answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub beneficiary_id: BeneficiaryId,
    pub week: Week,
    pub answered: bool,
    pub seconds_listened: u32,
}

impl CallRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.answered && self.seconds_listened > 0 {
            return Err(Error::validation(format!(
                "call for beneficiary {} in week {} has {} listened seconds but was not answered",
                self.beneficiary_id, self.week, self.seconds_listened
            )));
        }
        Ok(())
    }
}

fn check_threshold(threshold_seconds: u32) -> Result<()> {
    if threshold_seconds == 0 {
        return Err(Error::validation(
            "engagement threshold must be at least 1 second",
        ));
    }
    Ok(())
}

/// Whether a single call counts as engaged at the given listening
/// threshold (seconds). A zero threshold is rejected rather than treated
/// as trivially true.
pub fn engagement_state(record: &CallRecord, threshold_seconds: u32) -> Result<bool> {
    check_threshold(threshold_seconds)?;
    Ok(record.seconds_listened >= threshold_seconds)
}

/// Whether any call in the half-open window `[anchor - window, anchor)`
/// was engaged at the threshold. Calls outside the window (including the
/// anchor week itself) are ignored; an empty window or a history with no
/// calls in the window yields `false`.
pub fn engagement_window(
    history: &[CallRecord],
    threshold_seconds: u32,
    window_weeks: u32,
    anchor_week: Week,
) -> Result<bool> {
    check_threshold(threshold_seconds)?;
    let start = anchor_week.checked_sub(window_weeks).ok_or_else(|| {
        Error::validation(format!(
            "window of {window_weeks} weeks reaches before week 0 from anchor {anchor_week}"
        ))
    })?;
    for record in history {
        if record.week >= start
            && record.week < anchor_week
            && engagement_state(record, threshold_seconds)?
        {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Mean seconds listened per call over the calls that fall inside the week
/// range. No calls in range yields 0.
pub fn average_listenership(history: &[CallRecord], range: WeekRange) -> f64 {
    let mut total = 0u64;
    let mut count = 0u64;
    for record in history {
        if range.contains(record.week) {
            total += u64::from(record.seconds_listened);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

/// Grid of engagement feature definitions: each (threshold, window) pair
/// becomes one boolean feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    /// Listening thresholds in seconds, ascending.
    pub thresholds: Vec<u32>,
    /// Lookback windows in weeks, ascending.
    pub windows: Vec<u32>,
}

impl Default for FeatureGrid {
    fn default() -> Self {
        FeatureGrid {
            thresholds: vec![1, 5, 10, 30, 100],
            windows: vec![1, 2, 3],
        }
    }
}

impl FeatureGrid {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.windows.is_empty() {
            return Err(Error::validation(
                "feature grid needs at least one threshold and one window",
            ));
        }
        if self.thresholds.contains(&0) {
            return Err(Error::validation(
                "feature grid thresholds must be at least 1 second",
            ));
        }
        if !self.thresholds.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::validation(
                "feature grid thresholds must be strictly ascending",
            ));
        }
        if !self.windows.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::validation(
                "feature grid windows must be strictly ascending",
            ));
        }
        Ok(())
    }

    pub fn feature_count(&self) -> usize {
        self.thresholds.len() * self.windows.len()
    }

    /// (threshold, window) pairs in feature order: threshold-major,
    /// window-minor.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.thresholds
            .iter()
            .flat_map(move |&t| self.windows.iter().map(move |&w| (t, w)))
    }
}

/// Categorical stratification label: gestational-age bucket plus one bit
/// per feature-grid cell. Two beneficiaries are in the same stratum iff
/// their vectors are equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub gestational_bucket: u32,
    /// Engagement bits in the grid's threshold-major, window-minor order.
    pub engagement: Vec<bool>,
}

impl FeatureVector {
    /// Compact label like `g5:10010-11000-00000` for logs and CSV rows:
    /// bucket, then one group of window bits per threshold.
    pub fn label(&self, grid: &FeatureGrid) -> String {
        let mut out = format!("g{}:", self.gestational_bucket);
        for (i, chunk) in self.engagement.chunks(grid.windows.len().max(1)).enumerate() {
            if i > 0 {
                out.push('-');
            }
            for &bit in chunk {
                out.push(if bit { '1' } else { '0' });
            }
        }
        out
    }
}

/// Build the stratification features for one beneficiary at an anchor week
/// (the cohort's first intervention week). Gestational age in weeks is
/// bucketed by `gestational_bucket_weeks`.
pub fn feature_vector(
    history: &[CallRecord],
    anchor_week: Week,
    grid: &FeatureGrid,
    gestational_age_weeks: u32,
    gestational_bucket_weeks: u32,
) -> Result<FeatureVector> {
    grid.validate()?;
    if gestational_bucket_weeks == 0 {
        return Err(Error::validation(
            "gestational bucket width must be at least 1 week",
        ));
    }
    let mut engagement = Vec::with_capacity(grid.feature_count());
    for (threshold, window) in grid.pairs() {
        // Clamp the lookback at week 0 so early anchors still get a
        // well-defined (if shorter) window.
        let effective_window = window.min(anchor_week);
        engagement.push(engagement_window(
            history,
            threshold,
            effective_window,
            anchor_week,
        )?);
    }
    Ok(FeatureVector {
        gestational_bucket: gestational_age_weeks / gestational_bucket_weeks,
        engagement,
    })
}
