//! Cohort structure, covariate-balanced arm assignment, eligibility rules,
//! and the weekly budgeted intervention loop.
//!
//! The loop produces three id sets that the downstream analysis consumes:
//! the scheduled intervention-arm members (real calls), the shadow-scheduled
//! control-arm members (the same policy run against the control arm, no
//! calls placed), and the subset of scheduled members who actually picked
//! up. Everything the loop decides is recorded as replayable log events.

use crate::bandit::{self, ArmMdp, WhittleIndexValue};
use crate::config::{ExperimentConfig, IndexModel};
use crate::engagement::{feature_vector, CallRecord, FeatureGrid, FeatureVector};
use crate::error::{Error, Result};
use crate::rng::{self, stream_names};
use crate::simcohort::{
    draw_pickups, recent_engagement, simulate_survey, simulate_week, Beneficiary, LatentProfile,
    Population, WorldState,
};
use crate::survey::{Questionnaire, SurveyResponse};
use crate::types::{Arm, BeneficiaryId, Week, WeekRange};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Members stop being reachable this many weeks after delivery.
pub const POST_DELIVERY_ACTIVE_WEEKS: Week = 52;
/// An eligible member must have answered a call within this many weeks
/// before the intervention window opens.
pub const ELIGIBILITY_LOOKBACK_WEEKS: Week = 4;
/// Minimum enrollment tenure, in weeks, before a member can be scheduled.
pub const MIN_ENROLLED_WEEKS: Week = 3;
/// How many weeks of history feed the survey response model.
pub const SURVEY_ENGAGEMENT_LOOKBACK_WEEKS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub cohort_id: u32,
    pub registration_window: WeekRange,
    pub intervention_window: WeekRange,
    pub member_ids: Vec<BeneficiaryId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmAssignment {
    pub beneficiary_id: BeneficiaryId,
    pub cohort_id: u32,
    pub arm: Arm,
    /// Stratum label (gestational bucket plus engagement feature bits).
    pub stratum: String,
}

/// One replayable line of the trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Assigned {
        week: Week,
        cohort_id: u32,
        beneficiary_id: BeneficiaryId,
        arm: Arm,
        stratum: String,
    },
    Eligible {
        week: Week,
        cohort_id: u32,
        arm: Arm,
        ids: Vec<BeneficiaryId>,
    },
    Scheduled {
        week: Week,
        cohort_id: u32,
        arm: Arm,
        beneficiary_id: BeneficiaryId,
        state: usize,
        index: f64,
    },
    Shortfall {
        week: Week,
        cohort_id: u32,
        arm: Arm,
        budget: usize,
        eligible: usize,
    },
    Pickup {
        week: Week,
        beneficiary_id: BeneficiaryId,
        answered: bool,
    },
    Delivery {
        week: Week,
        beneficiary_id: BeneficiaryId,
    },
    SurveyInvited {
        week: Week,
        beneficiary_id: BeneficiaryId,
        arm: Arm,
        scheduled_week: Week,
    },
    SurveyResponded {
        week: Week,
        beneficiary_id: BeneficiaryId,
        responded: bool,
    },
}

/// Everything the log knows about one (shadow-)scheduled member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledRecord {
    pub week: Week,
    pub cohort_id: u32,
    pub arm: Arm,
    pub state: usize,
    pub index: f64,
}

/// Append-only event log with derived views kept consistent on every
/// record, so a log replayed from its serialized events re-validates the
/// run's invariants (one intervention per member, pickups only for
/// scheduled intervention members, and so on).
#[derive(Debug, Clone, Default)]
pub struct TrialLog {
    events: Vec<LogEvent>,
    arms: BTreeMap<BeneficiaryId, Arm>,
    scheduled: BTreeMap<BeneficiaryId, ScheduledRecord>,
    picked_up: BTreeSet<BeneficiaryId>,
    invited: BTreeMap<BeneficiaryId, Week>,
    responded: BTreeMap<BeneficiaryId, bool>,
}

impl TrialLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild a log from persisted events, re-running all consistency
    /// checks.
    pub fn from_events(events: impl IntoIterator<Item = LogEvent>) -> Result<Self> {
        let mut log = TrialLog::new();
        for event in events {
            log.record(event)?;
        }
        Ok(log)
    }

    /// Append one event, enforcing the log's structural invariants.
    pub fn record(&mut self, event: LogEvent) -> Result<()> {
        match &event {
            LogEvent::Assigned {
                beneficiary_id, arm, ..
            } => {
                if self.arms.insert(*beneficiary_id, *arm).is_some() {
                    return Err(Error::validation(format!(
                        "beneficiary {beneficiary_id} assigned to an arm twice"
                    )));
                }
            }
            LogEvent::Scheduled {
                beneficiary_id,
                arm,
                week,
                cohort_id,
                state,
                index,
            } => {
                if let Some(assigned) = self.arms.get(beneficiary_id) {
                    if assigned != arm {
                        return Err(Error::validation(format!(
                            "beneficiary {beneficiary_id} scheduled in the {arm} arm but \
                             assigned to {assigned}"
                        )));
                    }
                }
                let record = ScheduledRecord {
                    week: *week,
                    cohort_id: *cohort_id,
                    arm: *arm,
                    state: *state,
                    index: *index,
                };
                if self.scheduled.insert(*beneficiary_id, record).is_some() {
                    return Err(Error::validation(format!(
                        "beneficiary {beneficiary_id} scheduled more than once"
                    )));
                }
            }
            LogEvent::Pickup {
                beneficiary_id,
                answered,
                ..
            } => {
                match self.scheduled.get(beneficiary_id) {
                    Some(r) if r.arm == Arm::Intervention => {}
                    Some(_) => {
                        return Err(Error::validation(format!(
                            "pickup recorded for shadow-scheduled control member \
                             {beneficiary_id}"
                        )))
                    }
                    None => {
                        return Err(Error::validation(format!(
                            "pickup recorded for unscheduled beneficiary {beneficiary_id}"
                        )))
                    }
                }
                if *answered {
                    self.picked_up.insert(*beneficiary_id);
                }
            }
            LogEvent::SurveyInvited {
                beneficiary_id,
                scheduled_week,
                ..
            } => {
                if self
                    .invited
                    .insert(*beneficiary_id, *scheduled_week)
                    .is_some()
                {
                    return Err(Error::validation(format!(
                        "beneficiary {beneficiary_id} invited to the survey twice"
                    )));
                }
            }
            LogEvent::SurveyResponded {
                beneficiary_id,
                responded,
                ..
            } => {
                if !self.invited.contains_key(beneficiary_id) {
                    return Err(Error::validation(format!(
                        "survey outcome for uninvited beneficiary {beneficiary_id}"
                    )));
                }
                self.responded.insert(*beneficiary_id, *responded);
            }
            LogEvent::Eligible { .. } | LogEvent::Shortfall { .. } | LogEvent::Delivery { .. } => {}
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn arm_of(&self, id: BeneficiaryId) -> Option<Arm> {
        self.arms.get(&id).copied()
    }

    pub fn assigned(&self) -> &BTreeMap<BeneficiaryId, Arm> {
        &self.arms
    }

    pub fn was_scheduled(&self, id: BeneficiaryId) -> bool {
        self.scheduled.contains_key(&id)
    }

    pub fn scheduled(&self) -> &BTreeMap<BeneficiaryId, ScheduledRecord> {
        &self.scheduled
    }

    pub fn picked_up(&self, id: BeneficiaryId) -> bool {
        self.picked_up.contains(&id)
    }

    pub fn picked_up_set(&self) -> &BTreeSet<BeneficiaryId> {
        &self.picked_up
    }

    /// Survey invitees with the week they were (shadow-)scheduled.
    pub fn survey_invited(&self) -> &BTreeMap<BeneficiaryId, Week> {
        &self.invited
    }

    pub fn survey_responded(&self) -> &BTreeMap<BeneficiaryId, bool> {
        &self.responded
    }

    /// Scheduled counts per week for one arm — the paired-week audit view.
    pub fn weekly_scheduled_counts(&self, arm: Arm) -> BTreeMap<Week, usize> {
        let mut counts = BTreeMap::new();
        for record in self.scheduled.values() {
            if record.arm == arm {
                *counts.entry(record.week).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Stratified 50/50 arm split treating the full feature vector as a
/// categorical label. Within every stratum the arm counts differ by at
/// most one; odd strata hand their extra member to alternating arms
/// (initial side decided by one seeded coin flip), which also keeps the
/// whole cohort's arm sizes within one of each other. Single-member strata
/// are therefore settled by that seeded coin sequence; they are counted
/// and logged.
pub fn assign_arms(
    cohort: &Cohort,
    features: &BTreeMap<BeneficiaryId, FeatureVector>,
    grid: &FeatureGrid,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ArmAssignment>> {
    let mut strata: BTreeMap<&FeatureVector, Vec<BeneficiaryId>> = BTreeMap::new();
    for &id in &cohort.member_ids {
        let fv = features.get(&id).ok_or_else(|| {
            Error::validation(format!(
                "cohort {} member {id} has no feature vector",
                cohort.cohort_id
            ))
        })?;
        strata.entry(fv).or_default().push(id);
    }

    let mut extra_side = if rng.gen_bool(0.5) {
        Arm::Intervention
    } else {
        Arm::Control
    };
    let mut assignments = Vec::with_capacity(cohort.member_ids.len());
    let mut singleton_strata = 0usize;

    for (fv, mut members) in strata {
        members.sort_unstable();
        members.shuffle(rng);
        let half = members.len() / 2;
        let label = fv.label(grid);
        for (rank, &beneficiary_id) in members.iter().enumerate() {
            let arm = if rank < half {
                Arm::Intervention
            } else if rank < 2 * half {
                Arm::Control
            } else {
                extra_side
            };
            assignments.push(ArmAssignment {
                beneficiary_id,
                cohort_id: cohort.cohort_id,
                arm,
                stratum: label.clone(),
            });
        }
        if members.len() % 2 == 1 {
            if members.len() == 1 {
                singleton_strata += 1;
                log::debug!(
                    "cohort {}: stratum {label} has a single member; assigned to {extra_side} \
                     by the seeded coin sequence",
                    cohort.cohort_id
                );
            }
            extra_side = match extra_side {
                Arm::Intervention => Arm::Control,
                Arm::Control => Arm::Intervention,
            };
        }
    }
    if singleton_strata > 0 {
        log::info!(
            "cohort {}: {singleton_strata} single-member strata assigned by seeded coin",
            cohort.cohort_id
        );
    }

    assignments.sort_by_key(|a| a.beneficiary_id);
    Ok(assignments)
}

/// Per-member facts the eligibility rule needs beyond the log.
#[derive(Debug, Clone, Copy)]
pub struct EligibilityContext<'a> {
    /// Week being scheduled.
    pub week: Week,
    /// Start of the member's cohort intervention window (the answered-call
    /// lookback is anchored here, not at `week`).
    pub window_start: Week,
    pub history: &'a [CallRecord],
    pub expected_delivery_week: i64,
}

/// A member is eligible iff they are still receiving messages (enrolled,
/// not dropped, not past 12 months post-delivery), answered at least one
/// call in the 4 weeks before the intervention window opened, were never
/// previously scheduled in either arm, and have been enrolled at least 3
/// weeks.
pub fn is_eligible(beneficiary: &Beneficiary, ctx: &EligibilityContext, log: &TrialLog) -> bool {
    if !beneficiary.active_at(ctx.week) {
        return false;
    }
    if (ctx.week as i64) > ctx.expected_delivery_week + POST_DELIVERY_ACTIVE_WEEKS as i64 {
        return false;
    }
    if ctx.week < beneficiary.enrollment_week + MIN_ENROLLED_WEEKS {
        return false;
    }
    if log.was_scheduled(beneficiary.id) {
        return false;
    }
    let lookback_start = ctx.window_start.saturating_sub(ELIGIBILITY_LOOKBACK_WEEKS);
    ctx.history
        .iter()
        .any(|c| c.answered && c.week >= lookback_start && c.week < ctx.window_start)
}

/// Schedule the top-`budget` candidates by index for one arm and week,
/// recording the eligible set, each selection, and a shortfall entry when
/// fewer candidates than budget were available. Returns the scheduled ids
/// in priority order.
pub fn weekly_schedule(
    week: Week,
    cohort_id: u32,
    arm: Arm,
    candidates: &[WhittleIndexValue],
    budget: usize,
    log: &mut TrialLog,
) -> Result<Vec<BeneficiaryId>> {
    let mut ids: Vec<BeneficiaryId> = candidates.iter().map(|c| c.beneficiary_id).collect();
    ids.sort_unstable();
    log.record(LogEvent::Eligible {
        week,
        cohort_id,
        arm,
        ids,
    })?;

    let selected = bandit::select_top_k(candidates, budget);
    if selected.len() < budget {
        log.record(LogEvent::Shortfall {
            week,
            cohort_id,
            arm,
            budget,
            eligible: candidates.len(),
        })?;
    }
    let by_id: BTreeMap<BeneficiaryId, &WhittleIndexValue> = candidates
        .iter()
        .map(|c| (c.beneficiary_id, c))
        .collect();
    for &id in &selected {
        let c = by_id[&id];
        log.record(LogEvent::Scheduled {
            week,
            cohort_id,
            arm,
            beneficiary_id: id,
            state: c.state,
            index: c.index,
        })?;
    }
    Ok(selected)
}

/// Table-shaped attrition counts for one arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub registered: usize,
    pub active: usize,
    pub scheduled: usize,
    pub picked_up: usize,
    pub delivery_eligible: usize,
    pub surveyed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub intervention: StageCounts,
    pub control: StageCounts,
}

impl FunnelCounts {
    pub fn arm(&self, arm: Arm) -> &StageCounts {
        match arm {
            Arm::Intervention => &self.intervention,
            Arm::Control => &self.control,
        }
    }

    /// Rows as (stage name, intervention count, control count), funnel
    /// order.
    pub fn rows(&self) -> Vec<(&'static str, usize, usize)> {
        let i = &self.intervention;
        let c = &self.control;
        vec![
            ("registered", i.registered, c.registered),
            ("active", i.active, c.active),
            ("scheduled", i.scheduled, c.scheduled),
            ("picked_up", i.picked_up, c.picked_up),
            ("delivery_eligible", i.delivery_eligible, c.delivery_eligible),
            ("surveyed", i.surveyed, c.surveyed),
        ]
    }
}

/// Derive the per-arm attrition funnel from a completed log. Control
/// members are "picked up" by construction: their interventions are
/// virtual, so the stage passes everyone scheduled.
pub fn funnel_counts(population: &Population, log: &TrialLog) -> FunnelCounts {
    let window_start: BTreeMap<u32, Week> = population
        .cohorts
        .iter()
        .map(|c| (c.cohort_id, c.intervention_window.start))
        .collect();
    let mut per_arm = BTreeMap::new();
    for arm in [Arm::Intervention, Arm::Control] {
        per_arm.insert(
            arm,
            StageCounts {
                registered: 0,
                active: 0,
                scheduled: 0,
                picked_up: 0,
                delivery_eligible: 0,
                surveyed: 0,
            },
        );
    }

    for (&id, &arm) in log.assigned() {
        let counts = per_arm.get_mut(&arm).expect("both arms present");
        counts.registered += 1;
        let beneficiary = population.beneficiary(id);
        let start = window_start[&beneficiary.cohort_id];
        let delivery = population.profile(id).expected_delivery_week;
        if beneficiary.active_at(start)
            && (start as i64) <= delivery + POST_DELIVERY_ACTIVE_WEEKS as i64
        {
            counts.active += 1;
        }
    }
    for (&id, record) in log.scheduled() {
        let counts = per_arm.get_mut(&record.arm).expect("both arms present");
        counts.scheduled += 1;
        let picked = match record.arm {
            Arm::Intervention => log.picked_up(id),
            Arm::Control => true,
        };
        if picked {
            counts.picked_up += 1;
        }
    }
    for (&id, _) in log.survey_invited() {
        let arm = log.arm_of(id).expect("invitees are assigned");
        per_arm.get_mut(&arm).expect("both arms present").delivery_eligible += 1;
    }
    for (&id, &responded) in log.survey_responded() {
        if responded {
            let arm = log.arm_of(id).expect("responders are assigned");
            per_arm.get_mut(&arm).expect("both arms present").surveyed += 1;
        }
    }

    FunnelCounts {
        intervention: per_arm[&Arm::Intervention],
        control: per_arm[&Arm::Control],
    }
}

/// Complete result of one simulated trial.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub log: TrialLog,
    pub assignments: Vec<ArmAssignment>,
    pub world: WorldState,
    /// Survey answers from responders, in (beneficiary, question) order.
    pub responses: Vec<SurveyResponse>,
    /// Week the survey was administered (one week past the simulation).
    pub survey_week: Week,
    pub funnel: FunnelCounts,
}

/// The transition model the scheduler believes, as opposed to the true
/// dynamics the world simulates. The believed active effect is the
/// configured uplift, deliberately independent of the simulation's true
/// effect size.
fn belief_mdp(
    profile: &LatentProfile,
    history: &[CallRecord],
    window_start: Week,
    config: &ExperimentConfig,
) -> Result<ArmMdp> {
    let uplift = config.mdp.model_uplift;
    let (passive_engage, passive_stay) = match config.experiment.index_model {
        IndexModel::Configured => (profile.passive_engage, profile.passive_stay),
        IndexModel::Fitted => fit_passive_dynamics(
            history,
            window_start,
            config.experiment.mle_smoothing,
        )?,
    };
    ArmMdp::two_state(
        passive_engage,
        passive_stay,
        (passive_engage + uplift).min(1.0),
        (passive_stay + uplift).min(1.0),
        config.mdp.discount,
    )
}

/// Maximum-likelihood passive transition estimates from the engagement
/// states of consecutive answered-week pairs before `until_week`, with
/// additive smoothing.
pub fn fit_passive_dynamics(
    history: &[CallRecord],
    until_week: Week,
    smoothing: f64,
) -> Result<(f64, f64)> {
    let mut engaged_at = BTreeMap::new();
    for call in history {
        if call.week < until_week {
            engaged_at.insert(call.week, call.answered && call.seconds_listened >= 1);
        }
    }
    // counts[from] = (transitions into engaged, total transitions)
    let mut counts = [(0u64, 0u64); 2];
    for (&week, &engaged) in &engaged_at {
        if let Some(&next) = engaged_at.get(&(week + 1)) {
            let from = usize::from(engaged);
            counts[from].0 += u64::from(next);
            counts[from].1 += 1;
        }
    }
    let estimate = |state: usize| -> Result<f64> {
        let (hits, total) = counts[state];
        let denominator = total as f64 + 2.0 * smoothing;
        if denominator <= 0.0 {
            return Err(Error::validation(format!(
                "no observed transitions from state {state} and zero smoothing"
            )));
        }
        Ok((hits as f64 + smoothing) / denominator)
    };
    Ok((estimate(0)?, estimate(1)?))
}

/// Run the whole trial: sequential per-cohort assignment and weekly
/// scheduling, ground-truth world simulation, and the end-of-horizon
/// survey. Deterministic given the config's seeds.
pub fn run_trial(
    population: &Population,
    questionnaire: &Questionnaire,
    config: &ExperimentConfig,
) -> Result<TrialOutput> {
    let master_seed = config.experiment.master_seed;
    let grid = config.feature_grid();
    let horizon = config.horizon();
    let budgets: BTreeMap<u32, usize> = config
        .cohorts
        .iter()
        .map(|c| (c.cohort_id, c.weekly_budget as usize))
        .collect();
    for cohort in &population.cohorts {
        if !budgets.contains_key(&cohort.cohort_id) {
            return Err(Error::validation(format!(
                "population cohort {} has no matching config entry",
                cohort.cohort_id
            )));
        }
    }

    let mut world = WorldState::new(population);
    let mut log = TrialLog::new();
    let mut assignments: Vec<ArmAssignment> = Vec::new();
    let mut arm_of: Vec<Option<Arm>> = vec![None; population.len()];
    let mut beliefs: Vec<Option<ArmMdp>> = vec![None; population.len()];
    // Whittle indices memoized per (member, state); NaN marks "not yet".
    let mut index_cache: Vec<[f64; 2]> = vec![[f64::NAN, f64::NAN]; population.len()];

    for week in 0..horizon {
        for cohort in &population.cohorts {
            if cohort.intervention_window.start == week {
                let mut features = BTreeMap::new();
                for &id in &cohort.member_ids {
                    let beneficiary = population.beneficiary(id);
                    let fv = feature_vector(
                        world.history(id),
                        week,
                        &grid,
                        beneficiary.gestational_age_weeks,
                        config.engagement.gestational_bucket_weeks,
                    )?;
                    features.insert(id, fv);
                }
                let mut assignment_rng = rng::substream(
                    master_seed,
                    stream_names::ASSIGNMENT,
                    cohort.cohort_id as u64,
                );
                let assigned = assign_arms(cohort, &features, &grid, &mut assignment_rng)?;
                for a in &assigned {
                    arm_of[a.beneficiary_id.index()] = Some(a.arm);
                    log.record(LogEvent::Assigned {
                        week,
                        cohort_id: cohort.cohort_id,
                        beneficiary_id: a.beneficiary_id,
                        arm: a.arm,
                        stratum: a.stratum.clone(),
                    })?;
                }
                assignments.extend(assigned);
                for &id in &cohort.member_ids {
                    beliefs[id.index()] = Some(belief_mdp(
                        population.profile(id),
                        world.history(id),
                        week,
                        config,
                    )?);
                }
            }
        }

        let mut picked_this_week: BTreeSet<BeneficiaryId> = BTreeSet::new();
        for cohort in &population.cohorts {
            if !cohort.intervention_window.contains(week) {
                continue;
            }
            let budget = budgets[&cohort.cohort_id];
            let mut eligible: BTreeMap<Arm, Vec<WhittleIndexValue>> = BTreeMap::new();
            for &id in &cohort.member_ids {
                let beneficiary = population.beneficiary(id);
                let profile = population.profile(id);
                let ctx = EligibilityContext {
                    week,
                    window_start: cohort.intervention_window.start,
                    history: world.history(id),
                    expected_delivery_week: profile.expected_delivery_week,
                };
                if !is_eligible(beneficiary, &ctx, &log) {
                    continue;
                }
                let arm = arm_of[id.index()].expect("cohort assigned at window start");
                let state = usize::from(world.engaged_state(id));
                let cached = &mut index_cache[id.index()];
                if cached[state].is_nan() {
                    let mdp = beliefs[id.index()]
                        .as_ref()
                        .expect("belief built at window start");
                    cached[state] = bandit::whittle_index(mdp, state)?;
                }
                eligible.entry(arm).or_default().push(WhittleIndexValue {
                    beneficiary_id: id,
                    state,
                    index: cached[state],
                });
            }

            let scheduled_intervention = weekly_schedule(
                week,
                cohort.cohort_id,
                Arm::Intervention,
                eligible.get(&Arm::Intervention).map_or(&[][..], Vec::as_slice),
                budget,
                &mut log,
            )?;
            let mut pickup_rng =
                rng::substream(master_seed, stream_names::PICKUP, week as u64);
            for (id, answered) in
                draw_pickups(&scheduled_intervention, population, &mut pickup_rng)
            {
                log.record(LogEvent::Pickup {
                    week,
                    beneficiary_id: id,
                    answered,
                })?;
                if answered {
                    picked_this_week.insert(id);
                }
            }
            weekly_schedule(
                week,
                cohort.cohort_id,
                Arm::Control,
                eligible.get(&Arm::Control).map_or(&[][..], Vec::as_slice),
                budget,
                &mut log,
            )?;
        }

        let mut listen_rng = rng::substream(master_seed, stream_names::LISTEN, week as u64);
        let deliveries = simulate_week(
            &mut world,
            week,
            &picked_this_week,
            population,
            config,
            &mut listen_rng,
        );
        for id in deliveries {
            log.record(LogEvent::Delivery {
                week,
                beneficiary_id: id,
            })?;
        }
    }

    // Survey phase: control shadows and picked-up intervention members
    // whose expected delivery came after their (shadow-)intervention.
    let survey_week = horizon;
    let survey_seed = config.experiment.survey_seed();
    let mut responses = Vec::new();
    let scheduled: Vec<(BeneficiaryId, ScheduledRecord)> = log
        .scheduled()
        .iter()
        .map(|(&id, &record)| (id, record))
        .collect();
    for (id, record) in scheduled {
        let reachable = match record.arm {
            Arm::Intervention => log.picked_up(id),
            Arm::Control => true,
        };
        if !reachable {
            continue;
        }
        let profile = population.profile(id);
        if profile.expected_delivery_week <= record.week as i64 {
            continue;
        }
        log.record(LogEvent::SurveyInvited {
            week: survey_week,
            beneficiary_id: id,
            arm: record.arm,
            scheduled_week: record.week,
        })?;
        let mut survey_rng = rng::substream(survey_seed, stream_names::SURVEY, id.0);
        let recent = recent_engagement(
            world.history(id),
            survey_week,
            SURVEY_ENGAGEMENT_LOOKBACK_WEEKS,
        );
        let outcome = simulate_survey(
            id,
            profile,
            questionnaire,
            &config.survey,
            recent,
            world.cumulative_seconds(id) as f64,
            &mut survey_rng,
        );
        log.record(LogEvent::SurveyResponded {
            week: survey_week,
            beneficiary_id: id,
            responded: outcome.is_some(),
        })?;
        if let Some(answer_set) = outcome {
            responses.extend(answer_set);
        }
    }

    let funnel = funnel_counts(population, &log);
    Ok(TrialOutput {
        log,
        assignments,
        world,
        responses,
        survey_week,
        funnel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::simcohort::generate_population;
    use crate::survey::{Question, QuestionKind, QuestionOption};

    fn test_config(extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"
[experiment]
master_seed = 7
{extra}

[simulation]
effect_delta = 0.15

[[cohort]]
cohort_id = 1
size = 600
registration_start = 0
registration_weeks = 2
intervention_start = 8
intervention_weeks = 2
weekly_budget = 25
"#
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    fn tiny_questionnaire() -> Questionnaire {
        Questionnaire::new(vec![Question {
            question_id: "q1".into(),
            kind: QuestionKind::SingleChoice,
            text: "test".into(),
            options: vec![
                QuestionOption {
                    option_id: "yes".into(),
                    weight: 1.0,
                },
                QuestionOption {
                    option_id: "no".into(),
                    weight: 0.0,
                },
            ],
        }])
        .unwrap()
    }

    fn single_stratum_cohort(n: u64) -> (Cohort, BTreeMap<BeneficiaryId, FeatureVector>) {
        let grid = FeatureGrid::default();
        let ids: Vec<BeneficiaryId> = (0..n).map(BeneficiaryId).collect();
        let fv = FeatureVector {
            gestational_bucket: 2,
            engagement: vec![false; grid.feature_count()],
        };
        let features = ids.iter().map(|&id| (id, fv.clone())).collect();
        (
            Cohort {
                cohort_id: 1,
                registration_window: WeekRange::new(0, 2),
                intervention_window: WeekRange::new(8, 10),
                member_ids: ids,
            },
            features,
        )
    }

    fn arm_counts(assignments: &[ArmAssignment]) -> (usize, usize) {
        let i = assignments
            .iter()
            .filter(|a| a.arm == Arm::Intervention)
            .count();
        (i, assignments.len() - i)
    }

    #[test]
    fn single_stratum_splits_exactly_in_half() {
        let (cohort, features) = single_stratum_cohort(100);
        let grid = FeatureGrid::default();
        let mut rng = crate::rng::stream(1, "assignment");
        let assignments = assign_arms(&cohort, &features, &grid, &mut rng).unwrap();
        assert_eq!(arm_counts(&assignments), (50, 50));
    }

    #[test]
    fn two_even_strata_split_exactly() {
        let grid = FeatureGrid::default();
        let ids: Vec<BeneficiaryId> = (0..22).map(BeneficiaryId).collect();
        let mut fv_a = FeatureVector {
            gestational_bucket: 1,
            engagement: vec![false; grid.feature_count()],
        };
        let fv_b = fv_a.clone();
        fv_a.gestational_bucket = 2;
        let mut features = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            features.insert(id, if i < 10 { fv_a.clone() } else { fv_b.clone() });
        }
        let cohort = Cohort {
            cohort_id: 1,
            registration_window: WeekRange::new(0, 2),
            intervention_window: WeekRange::new(8, 10),
            member_ids: ids,
        };
        let mut rng = crate::rng::stream(2, "assignment");
        let assignments = assign_arms(&cohort, &features, &grid, &mut rng).unwrap();
        let mut per_stratum: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for a in &assignments {
            let entry = per_stratum.entry(a.stratum.as_str()).or_insert((0, 0));
            match a.arm {
                Arm::Intervention => entry.0 += 1,
                Arm::Control => entry.1 += 1,
            }
        }
        assert_eq!(per_stratum.len(), 2);
        for (_, (i, c)) in per_stratum {
            assert_eq!(i, c);
        }
        assert_eq!(arm_counts(&assignments), (11, 11));
    }

    #[test]
    fn odd_strata_keep_cohort_imbalance_within_one() {
        // Seven strata of three members each: per-stratum diff must be 1
        // and the alternator must keep the cohort total within 1.
        let grid = FeatureGrid::default();
        let ids: Vec<BeneficiaryId> = (0..21).map(BeneficiaryId).collect();
        let mut features = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            features.insert(
                id,
                FeatureVector {
                    gestational_bucket: (i / 3) as u32,
                    engagement: vec![false; grid.feature_count()],
                },
            );
        }
        let cohort = Cohort {
            cohort_id: 3,
            registration_window: WeekRange::new(0, 2),
            intervention_window: WeekRange::new(8, 10),
            member_ids: ids,
        };
        let mut rng = crate::rng::stream(5, "assignment");
        let assignments = assign_arms(&cohort, &features, &grid, &mut rng).unwrap();
        let (i, c) = arm_counts(&assignments);
        assert!(i.abs_diff(c) <= 1, "cohort split {i}/{c}");
        let mut per_stratum: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for a in &assignments {
            let entry = per_stratum.entry(a.stratum.as_str()).or_insert((0, 0));
            match a.arm {
                Arm::Intervention => entry.0 += 1,
                Arm::Control => entry.1 += 1,
            }
        }
        for (_, (i, c)) in per_stratum {
            assert!(i.abs_diff(c) <= 1);
        }
    }

    #[test]
    fn assignment_is_deterministic() {
        let (cohort, features) = single_stratum_cohort(51);
        let grid = FeatureGrid::default();
        let mut r1 = crate::rng::stream(9, "assignment");
        let mut r2 = crate::rng::stream(9, "assignment");
        assert_eq!(
            assign_arms(&cohort, &features, &grid, &mut r1).unwrap(),
            assign_arms(&cohort, &features, &grid, &mut r2).unwrap()
        );
    }

    #[test]
    fn missing_feature_is_rejected() {
        let (cohort, mut features) = single_stratum_cohort(4);
        features.remove(&BeneficiaryId(2));
        let grid = FeatureGrid::default();
        let mut rng = crate::rng::stream(1, "assignment");
        assert!(assign_arms(&cohort, &features, &grid, &mut rng).is_err());
    }

    fn eligible_member() -> (Beneficiary, Vec<CallRecord>) {
        let beneficiary = Beneficiary {
            id: BeneficiaryId(0),
            cohort_id: 1,
            enrollment_week: 0,
            gestational_age_weeks: 20,
            pregnant_at_enrollment: true,
            dropout_week: None,
        };
        let history = vec![CallRecord {
            beneficiary_id: BeneficiaryId(0),
            week: 8,
            answered: true,
            seconds_listened: 30,
        }];
        (beneficiary, history)
    }

    #[test]
    fn eligibility_accepts_recent_answer() {
        let (beneficiary, history) = eligible_member();
        let ctx = EligibilityContext {
            week: 10,
            window_start: 10,
            history: &history,
            expected_delivery_week: 20,
        };
        assert!(is_eligible(&beneficiary, &ctx, &TrialLog::new()));
    }

    #[test]
    fn eligibility_rejects_prior_intervention() {
        let (beneficiary, history) = eligible_member();
        let ctx = EligibilityContext {
            week: 10,
            window_start: 10,
            history: &history,
            expected_delivery_week: 20,
        };
        let mut log = TrialLog::new();
        log.record(LogEvent::Scheduled {
            week: 9,
            cohort_id: 1,
            arm: Arm::Intervention,
            beneficiary_id: beneficiary.id,
            state: 1,
            index: 0.3,
        })
        .unwrap();
        assert!(!is_eligible(&beneficiary, &ctx, &log));
    }

    #[test]
    fn eligibility_lookback_is_anchored_at_window_start() {
        let (beneficiary, mut history) = eligible_member();
        // Last answered call 5 weeks before the window opens: outside the
        // 4-week lookback even though the scheduling week is later.
        history[0].week = 5;
        {
            let ctx = EligibilityContext {
                week: 11,
                window_start: 10,
                history: &history,
                expected_delivery_week: 20,
            };
            assert!(!is_eligible(&beneficiary, &ctx, &TrialLog::new()));
        }
        history[0].week = 6;
        let ctx = EligibilityContext {
            week: 11,
            window_start: 10,
            history: &history,
            expected_delivery_week: 20,
        };
        assert!(is_eligible(&beneficiary, &ctx, &TrialLog::new()));
    }

    #[test]
    fn eligibility_requires_three_weeks_enrolled_and_activity() {
        let (mut beneficiary, history) = eligible_member();
        beneficiary.enrollment_week = 8;
        let ctx = EligibilityContext {
            week: 10,
            window_start: 10,
            history: &history,
            expected_delivery_week: 20,
        };
        assert!(!is_eligible(&beneficiary, &ctx, &TrialLog::new()));
        beneficiary.enrollment_week = 7;
        assert!(is_eligible(&beneficiary, &ctx, &TrialLog::new()));
        beneficiary.dropout_week = Some(9);
        assert!(!is_eligible(&beneficiary, &ctx, &TrialLog::new()));
        beneficiary.dropout_week = None;
        // More than a year past delivery.
        let ctx = EligibilityContext {
            expected_delivery_week: 10 - 53,
            ..ctx
        };
        assert!(!is_eligible(&beneficiary, &ctx, &TrialLog::new()));
    }

    fn candidate(id: u64, index: f64) -> WhittleIndexValue {
        WhittleIndexValue {
            beneficiary_id: BeneficiaryId(id),
            state: 0,
            index,
        }
    }

    #[test]
    fn schedule_takes_top_budget_and_logs_shortfall_when_short() {
        let mut log = TrialLog::new();
        let candidates: Vec<WhittleIndexValue> =
            (0..500).map(|i| candidate(i, i as f64 * 1e-3)).collect();
        let picked =
            weekly_schedule(0, 1, Arm::Intervention, &candidates, 330, &mut log).unwrap();
        assert_eq!(picked.len(), 330);
        assert!(!log
            .events()
            .iter()
            .any(|e| matches!(e, LogEvent::Shortfall { .. })));

        // Next week the previously scheduled members are no longer
        // candidates; a 200-strong pool under a 330 budget is a shortfall.
        let remaining: Vec<WhittleIndexValue> = candidates
            .iter()
            .filter(|c| !log.was_scheduled(c.beneficiary_id))
            .cloned()
            .collect();
        assert_eq!(remaining.len(), 170);
        let second =
            weekly_schedule(1, 1, Arm::Intervention, &remaining[..], 330, &mut log).unwrap();
        assert_eq!(second.len(), 170);
        assert!(picked.iter().all(|id| !second.contains(id)));
        assert!(log
            .events()
            .iter()
            .any(|e| matches!(e, LogEvent::Shortfall { budget: 330, eligible: 170, .. })));
    }

    #[test]
    fn log_rejects_duplicate_scheduling_and_bad_pickups() {
        let mut log = TrialLog::new();
        log.record(LogEvent::Scheduled {
            week: 0,
            cohort_id: 1,
            arm: Arm::Control,
            beneficiary_id: BeneficiaryId(4),
            state: 0,
            index: 0.1,
        })
        .unwrap();
        let duplicate = log.record(LogEvent::Scheduled {
            week: 1,
            cohort_id: 1,
            arm: Arm::Control,
            beneficiary_id: BeneficiaryId(4),
            state: 1,
            index: 0.2,
        });
        assert!(duplicate.is_err());
        // Pickups only exist for scheduled intervention members.
        let control_pickup = log.record(LogEvent::Pickup {
            week: 1,
            beneficiary_id: BeneficiaryId(4),
            answered: true,
        });
        assert!(control_pickup.is_err());
        let unscheduled_pickup = log.record(LogEvent::Pickup {
            week: 1,
            beneficiary_id: BeneficiaryId(9),
            answered: true,
        });
        assert!(unscheduled_pickup.is_err());
    }

    #[test]
    fn fitted_dynamics_count_consecutive_weeks() {
        let id = BeneficiaryId(0);
        let call = |week, engaged: bool| CallRecord {
            beneficiary_id: id,
            week,
            answered: true,
            seconds_listened: if engaged { 30 } else { 0 },
        };
        // States: 1,1,0,0,1 over weeks 0..5 → from-engaged: 1→1, 1→0;
        // from-non-engaged: 0→0, 0→1.
        let history = vec![call(0, true), call(1, true), call(2, false), call(3, false), call(4, true)];
        let (pe, ps) = fit_passive_dynamics(&history, 5, 0.0).unwrap();
        assert!((pe - 0.5).abs() < 1e-12);
        assert!((ps - 0.5).abs() < 1e-12);
        // Truncation drops the 0→1 transition into week 4.
        let (pe, _) = fit_passive_dynamics(&history, 4, 0.0).unwrap();
        assert!((pe - 0.0).abs() < 1e-12);
        assert!(fit_passive_dynamics(&history[..1], 5, 0.0).is_err());
        let (pe, ps) = fit_passive_dynamics(&[], 5, 1.0).unwrap();
        assert_eq!((pe, ps), (0.5, 0.5));
    }

    #[test]
    fn trial_invariants_hold_on_a_small_run() {
        let config = test_config("");
        let population = generate_population(&config);
        let output = run_trial(&population, &tiny_questionnaire(), &config).unwrap();

        // Budget binds in week one on both arms (plenty of eligibles).
        let per_week_i = output.log.weekly_scheduled_counts(Arm::Intervention);
        let per_week_c = output.log.weekly_scheduled_counts(Arm::Control);
        assert_eq!(per_week_i[&8], 25);
        assert_eq!(per_week_c[&8], 25);
        assert_eq!(per_week_i.keys().copied().collect::<Vec<_>>(), vec![8, 9]);

        // Every pickup belongs to a scheduled intervention member and the
        // scheduled sets stay within their assigned arms.
        for (&id, record) in output.log.scheduled() {
            assert_eq!(output.log.arm_of(id), Some(record.arm));
        }
        for &id in output.log.picked_up_set() {
            assert_eq!(output.log.arm_of(id), Some(Arm::Intervention));
        }
        // Survey invitees were all reachable and delivering after their
        // scheduled week.
        for (&id, &scheduled_week) in output.log.survey_invited() {
            let record = output.log.scheduled()[&id];
            assert_eq!(record.week, scheduled_week);
            assert!(
                population.profile(id).expected_delivery_week > scheduled_week as i64
            );
            if record.arm == Arm::Intervention {
                assert!(output.log.picked_up(id));
            }
        }
        // Funnel is internally monotone per arm.
        for counts in [&output.funnel.intervention, &output.funnel.control] {
            assert!(counts.registered >= counts.active);
            assert!(counts.active >= counts.scheduled);
            assert!(counts.scheduled >= counts.picked_up);
            assert!(counts.picked_up >= counts.delivery_eligible);
            assert!(counts.delivery_eligible >= counts.surveyed);
        }
        assert_eq!(
            output.funnel.intervention.registered + output.funnel.control.registered,
            600
        );
        // Control "pickups" are virtual: the stage passes everyone.
        assert_eq!(
            output.funnel.control.picked_up,
            output.funnel.control.scheduled
        );
    }

    #[test]
    fn certain_pickup_means_every_scheduled_member_picks_up() {
        let mut config = test_config("");
        config.funnel.pickup_base = 1.0;
        config.funnel.pickup_engagement_coupling = 0.0;
        let population = generate_population(&config);
        let output = run_trial(&population, &tiny_questionnaire(), &config).unwrap();
        let scheduled_intervention: Vec<BeneficiaryId> = output
            .log
            .scheduled()
            .iter()
            .filter(|(_, r)| r.arm == Arm::Intervention)
            .map(|(&id, _)| id)
            .collect();
        assert!(!scheduled_intervention.is_empty());
        assert!(scheduled_intervention
            .iter()
            .all(|&id| output.log.picked_up(id)));
    }

    #[test]
    fn trial_is_deterministic_and_replayable() {
        let config = test_config("");
        let population = generate_population(&config);
        let a = run_trial(&population, &tiny_questionnaire(), &config).unwrap();
        let b = run_trial(&population, &tiny_questionnaire(), &config).unwrap();
        assert_eq!(a.log.events(), b.log.events());
        assert_eq!(a.responses, b.responses);

        let replayed = TrialLog::from_events(a.log.events().to_vec()).unwrap();
        assert_eq!(replayed.scheduled(), a.log.scheduled());
        assert_eq!(replayed.picked_up_set(), a.log.picked_up_set());
        assert_eq!(replayed.survey_responded(), a.log.survey_responded());
    }

    #[test]
    fn survey_seed_redraws_surveys_without_touching_the_schedule() {
        let base = test_config("");
        let reseeded = test_config("survey_seed = 4242");
        let population = generate_population(&base);
        let a = run_trial(&population, &tiny_questionnaire(), &base).unwrap();
        let b = run_trial(&population, &tiny_questionnaire(), &reseeded).unwrap();

        let non_survey = |log: &TrialLog| -> Vec<LogEvent> {
            log.events()
                .iter()
                .filter(|e| !matches!(e, LogEvent::SurveyResponded { .. }))
                .cloned()
                .collect()
        };
        assert_eq!(non_survey(&a.log), non_survey(&b.log));
        let calls_a: Vec<_> = a.world.all_calls().cloned().collect();
        let calls_b: Vec<_> = b.world.all_calls().cloned().collect();
        assert_eq!(calls_a, calls_b);
        assert_ne!(
            a.log.survey_responded(),
            b.log.survey_responded(),
            "expected at least one survey outcome to change under a new survey seed"
        );
    }
}
