//! Synthetic beneficiary population and the weekly ground-truth world.
//!
//! This module is the verification oracle for the rest of the pipeline: it
//! knows each beneficiary's true dynamics and generates the observables —
//! weekly call records, intervention pickups, deliveries, survey responses
//! — that the scheduler and analysis are allowed to see.
//!
//! The weekly engagement state *is* the observable E@1 of that week's
//! call: an engaging week always yields an answered call of at least one
//! second, a non-engaging week yields either no answer or an answered call
//! recorded as zero seconds. Replaying generated histories through the
//! engagement module therefore reproduces the internal states exactly.

use crate::bandit::ArmMdp;
use crate::config::{ExperimentConfig, SurveySection};
use crate::engagement::CallRecord;
use crate::error::Result;
use crate::rng::{self, stream_names};
use crate::survey::{Questionnaire, QuestionKind, SurveyResponse};
use crate::trial::Cohort;
use crate::types::{BeneficiaryId, Week};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Observable enrollment facts for one beneficiary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beneficiary {
    pub id: BeneficiaryId,
    pub cohort_id: u32,
    pub enrollment_week: Week,
    /// Gestational age in weeks at enrollment; 0 for members who enrolled
    /// after delivery.
    pub gestational_age_weeks: u32,
    pub pregnant_at_enrollment: bool,
    /// Week the member silently stops being reachable, if ever.
    pub dropout_week: Option<Week>,
}

impl Beneficiary {
    pub fn enrolled_by(&self, week: Week) -> bool {
        week >= self.enrollment_week
    }

    pub fn active_at(&self, week: Week) -> bool {
        self.enrolled_by(week) && self.dropout_week.map_or(true, |d| week < d)
    }
}

/// Ground-truth behavioral parameters, hidden from the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub beneficiary_id: BeneficiaryId,
    /// True passive dynamics: P(engage next | not engaged) and
    /// P(stay engaged | engaged).
    pub passive_engage: f64,
    pub passive_stay: f64,
    /// True active dynamics: passive shifted toward engagement by the
    /// configured effect δ (clamped into [0, 1]).
    pub active_engage: f64,
    pub active_stay: f64,
    /// Mean seconds listened on an engaging call.
    pub listen_mean_seconds: f64,
    /// Probability of answering a live intervention call.
    pub pickup_probability: f64,
    /// Survey response model: sigmoid(base + slope * recent engagement).
    pub survey_response_base: f64,
    pub survey_response_slope: f64,
    /// Expected delivery week; negative for deliveries before program
    /// start (postpartum enrollees).
    pub expected_delivery_week: i64,
    /// Engagement state on the enrollment week's call.
    pub initial_engaged: bool,
}

impl LatentProfile {
    /// The true two-state MDP (reward = engagement indicator).
    pub fn true_mdp(&self, discount: f64) -> Result<ArmMdp> {
        ArmMdp::two_state(
            self.passive_engage,
            self.passive_stay,
            self.active_engage,
            self.active_stay,
            discount,
        )
    }

    fn next_engaged_probability(&self, engaged: bool, active: bool) -> f64 {
        match (engaged, active) {
            (false, false) => self.passive_engage,
            (true, false) => self.passive_stay,
            (false, true) => self.active_engage,
            (true, true) => self.active_stay,
        }
    }

    /// Long-run engagement fraction under passive dynamics.
    pub fn stationary_engagement(&self) -> f64 {
        let gain = self.passive_engage;
        let loss = 1.0 - self.passive_stay;
        if gain + loss <= 0.0 {
            // Absorbing edge case; treat the initial state as permanent.
            return if self.initial_engaged { 1.0 } else { 0.0 };
        }
        gain / (gain + loss)
    }
}

/// The generated study population: one entry per beneficiary (ids are
/// dense, `id.0 as usize` indexes the vectors) plus the cohort structure.
#[derive(Debug, Clone)]
pub struct Population {
    pub beneficiaries: Vec<Beneficiary>,
    pub profiles: Vec<LatentProfile>,
    pub cohorts: Vec<Cohort>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.beneficiaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beneficiaries.is_empty()
    }

    pub fn beneficiary(&self, id: BeneficiaryId) -> &Beneficiary {
        &self.beneficiaries[id.index()]
    }

    pub fn profile(&self, id: BeneficiaryId) -> &LatentProfile {
        &self.profiles[id.index()]
    }

    /// Rebuild from persisted parts, checking the dense-id convention.
    pub fn from_parts(
        beneficiaries: Vec<Beneficiary>,
        profiles: Vec<LatentProfile>,
        cohorts: Vec<Cohort>,
    ) -> Result<Self> {
        if beneficiaries.len() != profiles.len() {
            return Err(crate::error::Error::validation(format!(
                "{} beneficiaries with {} latent profiles",
                beneficiaries.len(),
                profiles.len()
            )));
        }
        for (i, b) in beneficiaries.iter().enumerate() {
            if b.id.index() != i || profiles[i].beneficiary_id != b.id {
                return Err(crate::error::Error::validation(
                    "beneficiary ids must be dense and aligned with profiles",
                ));
            }
        }
        Ok(Population {
            beneficiaries,
            profiles,
            cohorts,
        })
    }
}

/// Generate the population described by the config's cohort specs.
/// Deterministic given the master seed; each cohort consumes its own
/// substream so resizing one cohort leaves the others' draws untouched.
pub fn generate_population(config: &ExperimentConfig) -> Population {
    let sim = &config.simulation;
    let funnel = &config.funnel;
    let mut beneficiaries = Vec::new();
    let mut profiles = Vec::new();
    let mut cohorts = Vec::new();
    let mut next_id = 0u64;

    for spec in &config.cohorts {
        let mut rng = rng::substream(
            config.experiment.master_seed,
            stream_names::POPULATION,
            spec.cohort_id as u64,
        );
        let baseline = spec
            .baseline_engagement
            .unwrap_or(sim.baseline_engagement);
        let first = next_id;
        let mut clamped = 0usize;

        for _ in 0..spec.size {
            let id = BeneficiaryId(next_id);
            next_id += 1;

            let enrollment_week =
                spec.registration_start + rng.gen_range(0..spec.registration_weeks);
            let pregnant = rng.gen_bool(sim.pregnant_fraction);
            let (gestational_age_weeks, expected_delivery_week) = if pregnant {
                let g = rng.gen_range(sim.gestation_min..=sim.gestation_max);
                (g, enrollment_week as i64 + (40 - g) as i64)
            } else {
                let ago = rng.gen_range(0..=sim.postpartum_max_weeks);
                (0, enrollment_week as i64 - ago as i64)
            };
            let dropout_week = if rng.gen_bool(funnel.active_rate) {
                None
            } else {
                // Inactive members fall away some week strictly before
                // their cohort's intervention window opens.
                let lo = enrollment_week + 1;
                let hi = spec.intervention_start.max(lo + 1);
                Some(rng.gen_range(lo..hi.max(lo + 1)))
            };

            let passive_engage =
                rng.gen_range(sim.passive_engage_min..=sim.passive_engage_max);
            let passive_stay = rng.gen_range(sim.passive_stay_min..=sim.passive_stay_max);
            let delta = sim.effect_delta;
            let active_engage = passive_engage + delta;
            let active_stay = passive_stay + delta;
            let (active_engage, active_stay) = {
                let ae = active_engage.clamp(0.0, 1.0);
                let as_ = active_stay.clamp(0.0, 1.0);
                if ae != active_engage || as_ != active_stay {
                    clamped += 1;
                }
                (ae, as_)
            };
            let listen_mean_seconds =
                rng.gen_range(sim.listen_mean_min..=sim.listen_mean_max);
            let initial_engaged = rng.gen_bool(baseline);

            beneficiaries.push(Beneficiary {
                id,
                cohort_id: spec.cohort_id,
                enrollment_week,
                gestational_age_weeks,
                pregnant_at_enrollment: pregnant,
                dropout_week,
            });
            profiles.push(LatentProfile {
                beneficiary_id: id,
                passive_engage,
                passive_stay,
                active_engage,
                active_stay,
                listen_mean_seconds,
                pickup_probability: 0.0, // second pass below
                survey_response_base: funnel.survey_response_base,
                survey_response_slope: funnel.survey_response_slope,
                expected_delivery_week,
                initial_engaged,
            });
        }

        // Second pass: pickup probability tracks each member's stationary
        // engagement, centered on the cohort mean so the configured base
        // stays the cohort-average pickup rate.
        let members = &mut profiles[first as usize..next_id as usize];
        let mean_pi = members
            .iter()
            .map(|p| p.stationary_engagement())
            .sum::<f64>()
            / members.len().max(1) as f64;
        for p in members.iter_mut() {
            let centered = p.stationary_engagement() - mean_pi;
            p.pickup_probability = (funnel.pickup_base
                + funnel.pickup_engagement_coupling * centered)
                .clamp(0.0, 1.0);
        }

        if clamped > 0 {
            log::warn!(
                "cohort {}: effect delta pushed {clamped} active-transition probabilities \
                 outside [0, 1]; clamped",
                spec.cohort_id
            );
        }

        cohorts.push(Cohort {
            cohort_id: spec.cohort_id,
            registration_window: spec.registration_window(),
            intervention_window: spec.intervention_window(),
            member_ids: (first..next_id).map(BeneficiaryId).collect(),
        });
    }

    Population {
        beneficiaries,
        profiles,
        cohorts,
    }
}

/// Mutable world the weekly loop advances: engagement states, call
/// histories, and listening totals.
#[derive(Debug, Clone)]
pub struct WorldState {
    /// Next week to simulate.
    pub week: Week,
    engaged: Vec<bool>,
    histories: Vec<Vec<CallRecord>>,
    cumulative_seconds: Vec<u64>,
}

impl WorldState {
    pub fn new(population: &Population) -> Self {
        WorldState {
            week: 0,
            engaged: population.profiles.iter().map(|p| p.initial_engaged).collect(),
            histories: vec![Vec::new(); population.len()],
            cumulative_seconds: vec![0; population.len()],
        }
    }

    /// Engagement state as of the most recently simulated week (i.e. the
    /// state entering `self.week`).
    pub fn engaged_state(&self, id: BeneficiaryId) -> bool {
        self.engaged[id.index()]
    }

    pub fn history(&self, id: BeneficiaryId) -> &[CallRecord] {
        &self.histories[id.index()]
    }

    pub fn cumulative_seconds(&self, id: BeneficiaryId) -> u64 {
        self.cumulative_seconds[id.index()]
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    /// All call records in (beneficiary, week) order, for export.
    pub fn all_calls(&self) -> impl Iterator<Item = &CallRecord> {
        self.histories.iter().flatten()
    }
}

/// Advance the world by one week. `active_ids` are the beneficiaries whose
/// intervention call was both scheduled and picked up this week — only
/// they transition under the active action; shadow-scheduled control
/// members are never passed here and evolve passively. Returns the ids
/// whose expected delivery falls on this week.
///
/// Each enrolled, still-active beneficiary receives one automated call:
/// the engagement state transitions first (except on the enrollment week,
/// which reveals the initial state), then the call's answered flag and
/// listened seconds are drawn from the new state.
pub fn simulate_week(
    world: &mut WorldState,
    week: Week,
    active_ids: &BTreeSet<BeneficiaryId>,
    population: &Population,
    config: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<BeneficiaryId> {
    debug_assert_eq!(world.week, week, "weeks must be simulated in order");
    let sim = &config.simulation;
    let mut deliveries = Vec::new();

    for (idx, beneficiary) in population.beneficiaries.iter().enumerate() {
        if !beneficiary.active_at(week) {
            continue;
        }
        let profile = &population.profiles[idx];
        if week > beneficiary.enrollment_week {
            let action = active_ids.contains(&beneficiary.id);
            let p = profile.next_engaged_probability(world.engaged[idx], action);
            world.engaged[idx] = rng.gen_bool(p);
        }
        let engaged = world.engaged[idx];
        let (answered, seconds) = if engaged {
            let mu = profile.listen_mean_seconds.ln()
                - 0.5 * sim.listen_log_sigma * sim.listen_log_sigma;
            let draw = LogNormal::new(mu, sim.listen_log_sigma)
                .expect("validated sigma")
                .sample(rng);
            let seconds = (draw.round() as i64)
                .clamp(1, sim.listen_cap_seconds as i64) as u32;
            (true, seconds)
        } else {
            // Sub-threshold listening is recorded as zero seconds.
            (rng.gen_bool(sim.answer_prob_nonengaged), 0)
        };
        world.histories[idx].push(CallRecord {
            beneficiary_id: beneficiary.id,
            week,
            answered,
            seconds_listened: seconds,
        });
        world.cumulative_seconds[idx] += u64::from(seconds);
        if profile.expected_delivery_week == week as i64 {
            deliveries.push(beneficiary.id);
        }
    }

    world.week = week + 1;
    deliveries
}

/// Draw pickup outcomes for this week's scheduled intervention calls.
/// Draws happen in ascending id order regardless of input order, so the
/// result is independent of scheduling rank.
pub fn draw_pickups(
    scheduled: &[BeneficiaryId],
    population: &Population,
    rng: &mut ChaCha8Rng,
) -> Vec<(BeneficiaryId, bool)> {
    let mut ids: Vec<BeneficiaryId> = scheduled.to_vec();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let p = population.profile(id).pickup_probability;
            (id, rng.gen_bool(p))
        })
        .collect()
}

/// Fraction of the `lookback` weeks before `end_week` with an engaging
/// (answered, ≥ 1 s) call — the survey response model's engagement input.
pub fn recent_engagement(history: &[CallRecord], end_week: Week, lookback: u32) -> f64 {
    if lookback == 0 {
        return 0.0;
    }
    let start = end_week.saturating_sub(lookback);
    let engaged = history
        .iter()
        .filter(|c| c.week >= start && c.week < end_week && c.answered && c.seconds_listened >= 1)
        .count();
    engaged as f64 / lookback as f64
}

/// Simulate one survey attempt. Returns `None` when the member does not
/// respond; otherwise one response per question, in questionnaire order.
///
/// Response probability is sigmoid(base + slope · recent engagement) from
/// the member's profile. Per question, the member "knows" the answer with
/// probability sigmoid(base_q + slope_q · cumulative seconds listened):
/// single-choice picks the full-credit option when knowing (a uniformly
/// random zero-weight option otherwise); multi-choice selects each
/// positively weighted option independently with the knowing probability.
pub fn simulate_survey(
    beneficiary_id: BeneficiaryId,
    profile: &LatentProfile,
    questionnaire: &Questionnaire,
    survey_cfg: &SurveySection,
    recent_engagement: f64,
    cumulative_seconds: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<SurveyResponse>> {
    let respond_p = sigmoid(
        profile.survey_response_base + profile.survey_response_slope * recent_engagement,
    );
    if !rng.gen_bool(respond_p) {
        return None;
    }
    let mut responses = Vec::with_capacity(questionnaire.questions.len());
    for question in &questionnaire.questions {
        let coeffs = survey_cfg.coeffs(&question.question_id);
        let p_know = sigmoid(coeffs.base + coeffs.slope * cumulative_seconds);
        let mut selected = BTreeSet::new();
        match question.kind {
            QuestionKind::SingleChoice => {
                if rng.gen_bool(p_know) {
                    let full = question
                        .full_credit_options()
                        .next()
                        .expect("validated question has a full-credit option");
                    selected.insert(full.option_id.clone());
                } else {
                    let wrong: Vec<_> = question
                        .options
                        .iter()
                        .filter(|o| o.weight <= 0.0)
                        .collect();
                    let pick = &wrong[rng.gen_range(0..wrong.len())];
                    selected.insert(pick.option_id.clone());
                }
            }
            QuestionKind::MultiChoice => {
                for option in question.credited_options() {
                    if rng.gen_bool(p_know) {
                        selected.insert(option.option_id.clone());
                    }
                }
            }
        }
        responses.push(SurveyResponse {
            beneficiary_id,
            question_id: question.question_id.clone(),
            selected,
        });
    }
    Some(responses)
}
