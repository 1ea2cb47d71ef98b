//! Experiment configuration.
//!
//! One TOML file drives the whole pipeline: cohort definitions and budgets,
//! engagement feature grids, scheduler model parameters, ground-truth
//! simulation parameters, funnel probabilities, survey knowledge
//! coefficients, the matching threshold, resample counts, and the master
//! seed. Every random stream derives from the master seed — there are no
//! wall-clock defaults anywhere, so a config fully determines the run.

use crate::engagement::FeatureGrid;
use crate::error::{Error, Result};
use crate::types::{Week, WeekRange};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub engagement: EngagementSection,
    #[serde(default)]
    pub mdp: MdpSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub funnel: FunnelSection,
    #[serde(default)]
    pub survey: SurveySection,
    #[serde(rename = "cohort")]
    pub cohorts: Vec<CohortSpec>,

    /// Directory of the config file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Master seed; every named random stream is derived from it.
    pub master_seed: u64,
    /// Output directory (CLI `--out` overrides).
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Monte-Carlo resamples for permutation tests that exceed the exact-
    /// enumeration limit.
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    /// Maximum Whittle-index gap for a counterfactual pair.
    #[serde(default = "default_matching_threshold")]
    pub matching_threshold: f64,
    /// Pre/post window length for listenership gains.
    #[serde(default = "default_gain_window")]
    pub gain_window_weeks: u32,
    /// Weeks simulated past the last intervention window (must cover the
    /// post-gain window).
    #[serde(default = "default_gain_window")]
    pub horizon_padding_weeks: u32,
    /// Where the scheduler's per-beneficiary transition model comes from.
    #[serde(default)]
    pub index_model: IndexModel,
    /// Additive smoothing for fitted transition rows.
    #[serde(default = "default_smoothing")]
    pub mle_smoothing: f64,
    /// Optional separate seed for the survey-response stream. Changing it
    /// re-draws survey outcomes while leaving the intervention schedule
    /// byte-identical. Defaults to the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey_seed: Option<u64>,
}

impl ExperimentSection {
    pub fn survey_seed(&self) -> u64 {
        self.survey_seed.unwrap_or(self.master_seed)
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_resamples() -> usize {
    100_000
}
fn default_matching_threshold() -> f64 {
    0.01
}
fn default_gain_window() -> u32 {
    8
}
fn default_smoothing() -> f64 {
    1.0
}

/// Scheduler transition-model source. `Configured` hands the scheduler
/// each beneficiary's passive dynamics with the configured uplift applied
/// to the active action; `Fitted` estimates passive dynamics from the
/// beneficiary's own pre-window call history (with smoothing) and applies
/// the same uplift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexModel {
    #[default]
    Configured,
    Fitted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngagementSection {
    pub thresholds: Vec<u32>,
    pub windows: Vec<u32>,
    pub gestational_bucket_weeks: u32,
}

impl Default for EngagementSection {
    fn default() -> Self {
        let grid = FeatureGrid::default();
        EngagementSection {
            thresholds: grid.thresholds,
            windows: grid.windows,
            gestational_bucket_weeks: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpSection {
    /// Discount factor shared by scheduler beliefs and ground truth.
    pub discount: f64,
    /// Active-action engagement uplift the scheduler believes in. This is
    /// deliberately independent of the simulation's true `effect_delta`:
    /// a deployed model's beliefs never equal ground truth, and keeping
    /// them separate lets a null world (`effect_delta = 0`) still produce
    /// informative indices.
    pub model_uplift: f64,
}

impl Default for MdpSection {
    fn default() -> Self {
        MdpSection {
            discount: 0.9,
            model_uplift: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// True active-action engagement uplift (δ). Zero makes both actions
    /// identical in the ground truth.
    pub effect_delta: f64,
    /// Probability a non-engaged beneficiary becomes engaged next week
    /// under the passive action, drawn uniformly per beneficiary.
    pub passive_engage_min: f64,
    pub passive_engage_max: f64,
    /// Probability an engaged beneficiary stays engaged under passive.
    pub passive_stay_min: f64,
    pub passive_stay_max: f64,
    /// Probability of starting engaged at enrollment (per-cohort override
    /// available).
    pub baseline_engagement: f64,
    /// Mean seconds listened when engaged, drawn uniformly per beneficiary.
    pub listen_mean_min: f64,
    pub listen_mean_max: f64,
    /// Log-scale dispersion of engaged listening.
    pub listen_log_sigma: f64,
    /// Upper clamp on a single call's listened seconds.
    pub listen_cap_seconds: u32,
    /// Probability a non-engaging beneficiary still answers the automated
    /// call that week (listening under the minimum threshold, recorded as
    /// zero seconds). Engaging weeks always produce an answered call.
    pub answer_prob_nonengaged: f64,
    /// Gestational age at registration (weeks), uniform for pregnant
    /// members. Delivery is expected at 40 weeks gestation.
    pub gestation_min: u32,
    pub gestation_max: u32,
    /// Fraction of members pregnant at registration; the rest delivered up
    /// to `postpartum_max_weeks` before enrolling.
    pub pregnant_fraction: f64,
    pub postpartum_max_weeks: u32,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            effect_delta: 0.15,
            passive_engage_min: 0.01,
            passive_engage_max: 0.06,
            passive_stay_min: 0.88,
            passive_stay_max: 0.97,
            baseline_engagement: 0.6,
            listen_mean_min: 40.0,
            listen_mean_max: 90.0,
            listen_log_sigma: 0.6,
            listen_cap_seconds: 900,
            answer_prob_nonengaged: 0.65,
            gestation_min: 4,
            gestation_max: 40,
            pregnant_fraction: 0.85,
            postpartum_max_weeks: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunnelSection {
    /// Fraction of registered members still active at their cohort's
    /// window start (the rest silently drop out beforehand).
    pub active_rate: f64,
    /// Baseline probability of answering a live intervention call.
    pub pickup_base: f64,
    /// How strongly pickup probability tracks the member's stationary
    /// engagement level (centered within cohort).
    pub pickup_engagement_coupling: f64,
    /// Survey response model: sigmoid(base + slope * recent engagement),
    /// recent engagement being the answered-and-engaged fraction of the
    /// final four simulated weeks.
    pub survey_response_base: f64,
    pub survey_response_slope: f64,
}

impl Default for FunnelSection {
    fn default() -> Self {
        FunnelSection {
            active_rate: 0.58,
            pickup_base: 0.772,
            pickup_engagement_coupling: 0.3,
            survey_response_base: -0.35,
            survey_response_slope: 0.5,
        }
    }
}

/// Per-question knowledge model: probability of knowing the answer is
/// sigmoid(base + slope * cumulative seconds listened). Slopes must be
/// non-negative — listening never erases knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeCoeffs {
    pub base: f64,
    pub slope: f64,
}

impl Default for KnowledgeCoeffs {
    fn default() -> Self {
        KnowledgeCoeffs {
            base: 0.0,
            slope: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurveySection {
    /// `"default"` for the questionnaire shipped with the crate, or a path
    /// (relative to the config file) to a questionnaire text file.
    pub questionnaire: String,
    /// Fallback coefficients for questions absent from `knowledge`.
    pub knowledge_default: KnowledgeCoeffs,
    /// Per-question knowledge coefficients, keyed by question id.
    pub knowledge: BTreeMap<String, KnowledgeCoeffs>,
}

impl Default for SurveySection {
    fn default() -> Self {
        SurveySection {
            questionnaire: "default".to_string(),
            knowledge_default: KnowledgeCoeffs::default(),
            knowledge: BTreeMap::new(),
        }
    }
}

impl SurveySection {
    pub fn coeffs(&self, question_id: &str) -> KnowledgeCoeffs {
        self.knowledge
            .get(question_id)
            .copied()
            .unwrap_or(self.knowledge_default)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub cohort_id: u32,
    pub size: usize,
    pub registration_start: Week,
    pub registration_weeks: u32,
    pub intervention_start: Week,
    pub intervention_weeks: u32,
    /// Interventions scheduled per week while this cohort's window is
    /// active.
    pub weekly_budget: u32,
    /// Overrides `simulation.baseline_engagement` for this cohort.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_engagement: Option<f64>,
}

impl CohortSpec {
    pub fn registration_window(&self) -> WeekRange {
        WeekRange::new(
            self.registration_start,
            self.registration_start + self.registration_weeks,
        )
    }

    pub fn intervention_window(&self) -> WeekRange {
        WeekRange::new(
            self.intervention_start,
            self.intervention_start + self.intervention_weeks,
        )
    }
}

impl ExperimentConfig {
    /// Parse and validate a config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        config.base_dir = path.parent().map(|p| p.to_path_buf());
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn feature_grid(&self) -> FeatureGrid {
        FeatureGrid {
            thresholds: self.engagement.thresholds.clone(),
            windows: self.engagement.windows.clone(),
        }
    }

    /// Path of a file-based questionnaire, resolved against the config
    /// directory; `None` means the embedded default.
    pub fn questionnaire_path(&self) -> Option<PathBuf> {
        if self.survey.questionnaire == "default" {
            return None;
        }
        let p = PathBuf::from(&self.survey.questionnaire);
        if p.is_relative() {
            if let Some(base) = &self.base_dir {
                return Some(base.join(p));
            }
        }
        Some(p)
    }

    /// Last simulated week (exclusive): the latest intervention window end
    /// plus the padding needed for post-intervention gain windows.
    pub fn horizon(&self) -> Week {
        let last_end = self
            .cohorts
            .iter()
            .map(|c| c.intervention_window().end)
            .max()
            .unwrap_or(0);
        last_end + self.experiment.horizon_padding_weeks
    }

    /// Canonical serialized form used for the manifest's config hash. The
    /// output directory is normalized away: where artifacts land is not
    /// part of the experiment's identity, so runs into different
    /// directories still hash alike.
    pub fn canonical_toml(&self) -> String {
        let mut canonical = self.clone();
        canonical.experiment.output_dir = default_output_dir();
        canonical.base_dir = None;
        toml::to_string(&canonical).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let exp = &self.experiment;
        if exp.resamples == 0 {
            return Err(Error::config("experiment.resamples must be at least 1"));
        }
        if !(exp.matching_threshold.is_finite() && exp.matching_threshold > 0.0) {
            return Err(Error::config(format!(
                "experiment.matching_threshold must be positive, got {}",
                exp.matching_threshold
            )));
        }
        if exp.gain_window_weeks == 0 {
            return Err(Error::config("experiment.gain_window_weeks must be at least 1"));
        }
        if exp.horizon_padding_weeks < exp.gain_window_weeks {
            return Err(Error::config(format!(
                "experiment.horizon_padding_weeks ({}) must cover the post-intervention gain \
                 window ({} weeks)",
                exp.horizon_padding_weeks, exp.gain_window_weeks
            )));
        }
        if !(exp.mle_smoothing.is_finite() && exp.mle_smoothing >= 0.0) {
            return Err(Error::config("experiment.mle_smoothing must be non-negative"));
        }

        self.feature_grid()
            .validate()
            .map_err(|e| Error::config(format!("engagement grid: {e}")))?;
        if self.engagement.gestational_bucket_weeks == 0 {
            return Err(Error::config(
                "engagement.gestational_bucket_weeks must be at least 1",
            ));
        }

        if !(self.mdp.discount > 0.0 && self.mdp.discount < 1.0) {
            return Err(Error::config(format!(
                "mdp.discount must lie strictly inside (0, 1), got {}",
                self.mdp.discount
            )));
        }
        check_unit("mdp.model_uplift", self.mdp.model_uplift)?;

        let sim = &self.simulation;
        if !(-1.0..=1.0).contains(&sim.effect_delta) || !sim.effect_delta.is_finite() {
            return Err(Error::config(format!(
                "simulation.effect_delta must lie in [-1, 1], got {}",
                sim.effect_delta
            )));
        }
        check_unit_range(
            "simulation.passive_engage",
            sim.passive_engage_min,
            sim.passive_engage_max,
        )?;
        check_unit_range(
            "simulation.passive_stay",
            sim.passive_stay_min,
            sim.passive_stay_max,
        )?;
        check_unit("simulation.baseline_engagement", sim.baseline_engagement)?;
        if !(sim.listen_mean_min > 0.0 && sim.listen_mean_max >= sim.listen_mean_min) {
            return Err(Error::config(
                "simulation.listen_mean_min/max must be positive and ordered",
            ));
        }
        if !(sim.listen_log_sigma.is_finite() && sim.listen_log_sigma >= 0.0) {
            return Err(Error::config("simulation.listen_log_sigma must be non-negative"));
        }
        if sim.listen_cap_seconds == 0 {
            return Err(Error::config("simulation.listen_cap_seconds must be at least 1"));
        }
        check_unit(
            "simulation.answer_prob_nonengaged",
            sim.answer_prob_nonengaged,
        )?;
        if sim.gestation_min > sim.gestation_max || sim.gestation_max > 40 {
            return Err(Error::config(
                "simulation.gestation_min/max must be ordered and at most 40 weeks",
            ));
        }
        check_unit("simulation.pregnant_fraction", sim.pregnant_fraction)?;

        let funnel = &self.funnel;
        check_unit("funnel.active_rate", funnel.active_rate)?;
        check_unit("funnel.pickup_base", funnel.pickup_base)?;
        if !funnel.pickup_engagement_coupling.is_finite() {
            return Err(Error::config("funnel.pickup_engagement_coupling must be finite"));
        }
        if !funnel.survey_response_base.is_finite() || !funnel.survey_response_slope.is_finite() {
            return Err(Error::config("funnel.survey_response coefficients must be finite"));
        }

        for (qid, coeffs) in &self.survey.knowledge {
            if !coeffs.base.is_finite() || !coeffs.slope.is_finite() || coeffs.slope < 0.0 {
                return Err(Error::config(format!(
                    "survey.knowledge.{qid}: base must be finite and slope non-negative"
                )));
            }
        }
        if self.survey.knowledge_default.slope < 0.0 {
            return Err(Error::config(
                "survey.knowledge_default slope must be non-negative",
            ));
        }

        if self.cohorts.is_empty() {
            return Err(Error::config("at least one [[cohort]] is required"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for spec in &self.cohorts {
            let id = spec.cohort_id;
            if !ids.insert(id) {
                return Err(Error::config(format!("duplicate cohort_id {id}")));
            }
            if spec.size < 2 {
                return Err(Error::config(format!(
                    "cohort {id}: size must be at least 2"
                )));
            }
            if spec.registration_weeks == 0 || spec.intervention_weeks == 0 {
                return Err(Error::config(format!(
                    "cohort {id}: registration and intervention windows must be non-empty"
                )));
            }
            if spec.intervention_start < spec.registration_window().end {
                return Err(Error::config(format!(
                    "cohort {id}: intervention window {} starts before registration {} ends",
                    spec.intervention_window(),
                    spec.registration_window()
                )));
            }
            if let Some(b) = spec.baseline_engagement {
                check_unit(&format!("cohort {id}: baseline_engagement"), b)?;
            }
        }
        // Intervention windows must be disjoint and sequential in listed
        // order: one cohort is scheduled at a time.
        for pair in self.cohorts.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.intervention_start < a.intervention_window().end {
                return Err(Error::config(format!(
                    "cohort {} intervention window {} must start at or after cohort {}'s end {}",
                    b.cohort_id,
                    b.intervention_window(),
                    a.cohort_id,
                    a.intervention_window()
                )));
            }
        }
        Ok(())
    }
}

fn check_unit(name: &str, value: f64) -> Result<()> {
    if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
        return Err(Error::config(format!(
            "{name} must lie in [0, 1], got {value}"
        )));
    }
    Ok(())
}

fn check_unit_range(name: &str, min: f64, max: f64) -> Result<()> {
    check_unit(&format!("{name}_min"), min)?;
    check_unit(&format!("{name}_max"), max)?;
    if min > max {
        return Err(Error::config(format!("{name}_min exceeds {name}_max")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
[experiment]
master_seed = 7

[[cohort]]
cohort_id = 1
size = 100
registration_start = 0
registration_weeks = 2
intervention_start = 6
intervention_weeks = 2
weekly_budget = 10
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        assert_eq!(config.experiment.master_seed, 7);
        assert_eq!(config.experiment.matching_threshold, 0.01);
        assert_eq!(config.feature_grid().feature_count(), 15);
        assert_eq!(config.horizon(), 16);
        assert_eq!(config.mdp.discount, 0.9);
    }

    #[test]
    fn missing_master_seed_is_rejected() {
        let text = minimal_toml().replace("master_seed = 7", "");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = minimal_toml().replace("master_seed = 7", "master_seed = 7\nmaster_sede = 9");
        let err = ExperimentConfig::from_toml_str(&text);
        assert!(err.is_err());
    }

    #[test]
    fn overlapping_intervention_windows_are_rejected() {
        let text = format!(
            "{}\n[[cohort]]\ncohort_id = 2\nsize = 50\nregistration_start = 0\nregistration_weeks = 2\nintervention_start = 7\nintervention_weeks = 2\nweekly_budget = 5\n",
            minimal_toml()
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("must start at or after"));
    }

    #[test]
    fn bad_threshold_and_negative_slope_are_rejected() {
        let text = minimal_toml() + "\n[experiment2]\n";
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = minimal_toml().replace(
            "[experiment]",
            "[survey.knowledge.q1]\nbase = 0.0\nslope = -1.0\n[experiment]",
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("slope"));
    }

    #[test]
    fn canonical_form_is_stable() {
        let a = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        let b = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        assert_eq!(a.canonical_toml(), b.canonical_toml());
    }
}
