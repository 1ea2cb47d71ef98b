//! Shared identifier and time types.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Stable identifier for one program participant.
///
/// Generated populations assign ids densely from zero, which lets the
/// simulator index per-beneficiary state by `id.0 as usize`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct BeneficiaryId(pub u64);

impl BeneficiaryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for BeneficiaryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Program week, counted from week 0 = program start.
pub type Week = u32;

/// Half-open week interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekRange {
    pub start: Week,
    pub end: Week,
}

impl WeekRange {
    pub fn new(start: Week, end: Week) -> Self {
        WeekRange { start, end }
    }

    pub fn contains(&self, week: Week) -> bool {
        week >= self.start && week < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    /// Iterate the weeks in the range in ascending order.
    pub fn weeks(&self) -> impl Iterator<Item = Week> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &WeekRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for WeekRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Trial arm. `Intervention` members are candidates for real service calls;
/// `Control` members are only ever shadow-scheduled.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Intervention,
    Control,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Intervention => "intervention",
            Arm::Control => "control",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
