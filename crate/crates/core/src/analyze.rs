//! Counterfactual analysis: index-based matching across arms,
//! listenership-gain metrics with cumulative curves, and per-question
//! score comparisons backed by permutation tests.

use crate::engagement::{average_listenership, CallRecord};
use crate::error::{Error, Result};
use crate::rng::{self, stream_names};
use crate::survey::{group_stats, GroupStats, Questionnaire, ScoreRow};
use crate::trial::TrialLog;
use crate::types::{Arm, BeneficiaryId, Week, WeekRange};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Largest number of distinct label assignments the permutation test will
/// enumerate exhaustively before falling back to Monte-Carlo resampling.
pub const EXACT_ENUMERATION_LIMIT: f64 = 1e6;
/// Slack used when comparing resampled mean differences to the observed
/// one, so exact ties count as at-least-as-extreme.
const DIFF_TOLERANCE: f64 = 1e-12;

/// One arm member entering the matcher: who they are, where their index
/// came from, and when they were (shadow-)scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub beneficiary_id: BeneficiaryId,
    pub cohort_id: u32,
    pub index: f64,
    pub scheduled_week: Week,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub intervention_id: BeneficiaryId,
    pub control_id: BeneficiaryId,
    pub cohort_id: u32,
    pub index_gap: f64,
    pub intervention_week: Week,
    pub control_week: Week,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPairSet {
    pub pairs: Vec<MatchedPair>,
    pub threshold: f64,
    pub unmatched_intervention: Vec<BeneficiaryId>,
    pub unmatched_control: Vec<BeneficiaryId>,
}

impl MatchedPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Greedily pair intervention members with control members whose indices
/// are within `threshold`, separately within each cohort. Both sides are
/// sorted by descending index (ties broken by ascending id); a two-pointer
/// walk pairs the current heads when their gap fits and otherwise drops
/// the head with the larger index into the unmatched list.
pub fn match_counterfactual(
    intervention: &[MatchCandidate],
    control: &[MatchCandidate],
    threshold: f64,
) -> Result<MatchedPairSet> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::validation(format!(
            "matching threshold must be positive and finite, got {threshold}"
        )));
    }
    let mut by_cohort: BTreeMap<u32, (Vec<&MatchCandidate>, Vec<&MatchCandidate>)> =
        BTreeMap::new();
    for member in intervention {
        by_cohort.entry(member.cohort_id).or_default().0.push(member);
    }
    for member in control {
        by_cohort.entry(member.cohort_id).or_default().1.push(member);
    }

    let descending = |a: &&MatchCandidate, b: &&MatchCandidate| {
        b.index
            .total_cmp(&a.index)
            .then_with(|| a.beneficiary_id.cmp(&b.beneficiary_id))
    };

    let mut set = MatchedPairSet {
        pairs: Vec::new(),
        threshold,
        unmatched_intervention: Vec::new(),
        unmatched_control: Vec::new(),
    };
    for (&cohort_id, (side_i, side_c)) in by_cohort.iter_mut() {
        side_i.sort_by(descending);
        side_c.sort_by(descending);
        let (mut i, mut c) = (0usize, 0usize);
        while i < side_i.len() && c < side_c.len() {
            let gap = (side_i[i].index - side_c[c].index).abs();
            if gap <= threshold {
                set.pairs.push(MatchedPair {
                    intervention_id: side_i[i].beneficiary_id,
                    control_id: side_c[c].beneficiary_id,
                    cohort_id,
                    index_gap: gap,
                    intervention_week: side_i[i].scheduled_week,
                    control_week: side_c[c].scheduled_week,
                });
                i += 1;
                c += 1;
            } else if side_i[i].index > side_c[c].index {
                set.unmatched_intervention.push(side_i[i].beneficiary_id);
                i += 1;
            } else {
                set.unmatched_control.push(side_c[c].beneficiary_id);
                c += 1;
            }
        }
        set.unmatched_intervention
            .extend(side_i[i..].iter().map(|m| m.beneficiary_id));
        set.unmatched_control
            .extend(side_c[c..].iter().map(|m| m.beneficiary_id));
    }
    Ok(set)
}

/// Matcher inputs drawn from a finished trial log: for the intervention
/// arm the members who actually picked up, for the control arm everyone
/// shadow-scheduled. Indices and weeks come from the scheduling records.
pub fn pickup_candidates(log: &TrialLog, arm: Arm) -> Vec<MatchCandidate> {
    log.scheduled()
        .iter()
        .filter(|(&id, record)| {
            record.arm == arm && (arm == Arm::Control || log.picked_up(id))
        })
        .map(|(&id, record)| MatchCandidate {
            beneficiary_id: id,
            cohort_id: record.cohort_id,
            index: record.index,
            scheduled_week: record.week,
        })
        .collect()
}

/// Matcher inputs for the score analysis: members of one arm who answered
/// the survey.
pub fn responder_candidates(log: &TrialLog, arm: Arm) -> Vec<MatchCandidate> {
    log.survey_responded()
        .iter()
        .filter(|(_, &responded)| responded)
        .filter_map(|(&id, _)| {
            let record = log.scheduled().get(&id)?;
            (record.arm == arm).then_some(MatchCandidate {
                beneficiary_id: id,
                cohort_id: record.cohort_id,
                index: record.index,
                scheduled_week: record.week,
            })
        })
        .collect()
}

/// Pre/post listenership change around one member's intervention week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub beneficiary_id: BeneficiaryId,
    pub pre_avg: f64,
    pub post_avg: f64,
    pub gain: f64,
    pub intervention_week: Week,
}

/// Average seconds listened over the `window_weeks` after the intervention
/// week (inclusive) minus the average over the `window_weeks` before it.
/// A window with no calls contributes an average of zero.
pub fn listenership_gain(
    beneficiary_id: BeneficiaryId,
    history: &[CallRecord],
    intervention_week: Week,
    window_weeks: u32,
) -> GainRecord {
    let pre = WeekRange::new(
        intervention_week.saturating_sub(window_weeks),
        intervention_week,
    );
    let post = WeekRange::new(
        intervention_week,
        intervention_week.saturating_add(window_weeks),
    );
    let pre_avg = average_listenership(history, pre);
    let post_avg = average_listenership(history, post);
    GainRecord {
        beneficiary_id,
        pre_avg,
        post_avg,
        gain: post_avg - pre_avg,
        intervention_week,
    }
}

/// Running total, over the supplied week grid, of the mean gain among
/// members intervened in each week. A grid week in which nobody was
/// intervened contributes zero.
pub fn cumulative_gain_curve(gains: &[GainRecord], weeks: &[Week]) -> Vec<f64> {
    let mut by_week: BTreeMap<Week, Vec<f64>> = BTreeMap::new();
    for record in gains {
        by_week
            .entry(record.intervention_week)
            .or_default()
            .push(record.gain);
    }
    let weekly_means: BTreeMap<Week, f64> = by_week
        .into_iter()
        .map(|(week, week_gains)| {
            let mean = week_gains.iter().sum::<f64>() / week_gains.len() as f64;
            (week, mean)
        })
        .collect();
    weeks
        .iter()
        .map(|&week| {
            if !weekly_means.contains_key(&week) {
                log::debug!("no members intervened in week {week}; curve step is zero");
            }
            weekly_means.range(..=week).map(|(_, m)| m).sum()
        })
        .collect()
}

fn validate_permutation_inputs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation(
            "permutation test needs two nonempty score lists",
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::validation("permutation test scores must be finite"));
    }
    Ok(())
}

fn pooled_variance_is_zero(a: &[f64], b: &[f64]) -> bool {
    let mut values = a.iter().chain(b);
    let first = *values.next().expect("validated nonempty");
    values.all(|&v| (v - first).abs() < DIFF_TOLERANCE)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut result = 1.0f64;
    for i in 0..k {
        result = result * (n - i) as f64 / (i + 1) as f64;
    }
    result
}

/// |mean difference| of the labeling where `chosen` indices of `pooled`
/// form side a.
fn label_diff(pooled: &[f64], chosen_sum: f64, na: usize) -> f64 {
    let total: f64 = pooled.iter().sum();
    let nb = pooled.len() - na;
    (chosen_sum / na as f64 - (total - chosen_sum) / nb as f64).abs()
}

fn exact_pvalue(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let na = a.len();
    let n = pooled.len();
    let observed = (mean(a) - mean(b)).abs();

    // Lexicographic walk over all index combinations of size na.
    let mut combo: Vec<usize> = (0..na).collect();
    let mut hits = 0u64;
    let mut total = 0u64;
    loop {
        let sum: f64 = combo.iter().map(|&i| pooled[i]).sum();
        if label_diff(&pooled, sum, na) >= observed - DIFF_TOLERANCE {
            hits += 1;
        }
        total += 1;
        // Advance to the next combination.
        let mut pos = na;
        while pos > 0 {
            pos -= 1;
            if combo[pos] != pos + n - na {
                combo[pos] += 1;
                for later in pos + 1..na {
                    combo[later] = combo[later - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return hits as f64 / total as f64;
            }
        }
    }
}

fn sampled_pvalue(a: &[f64], b: &[f64], resamples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let na = a.len();
    let n = pooled.len();
    let observed = (mean(a) - mean(b)).abs();
    let mut hits = 0u64;
    for _ in 0..resamples {
        // Partial shuffle: after the loop the first na entries are a
        // uniform random subset (starting arrangement is irrelevant).
        let mut sum = 0.0;
        for i in 0..na {
            let j = rng.gen_range(i..n);
            pooled.swap(i, j);
            sum += pooled[i];
        }
        if label_diff(&pooled, sum, na) >= observed - DIFF_TOLERANCE {
            hits += 1;
        }
    }
    (hits as f64 + 1.0) / (resamples as f64 + 1.0)
}

fn permutation_pvalue_with(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    validate_permutation_inputs(a, b)?;
    if pooled_variance_is_zero(a, b) {
        return Ok(1.0);
    }
    let combinations = binomial(a.len() + b.len(), a.len());
    if combinations <= EXACT_ENUMERATION_LIMIT {
        Ok(exact_pvalue(a, b))
    } else {
        if resamples == 0 {
            return Err(Error::validation("resample count must be positive"));
        }
        Ok(sampled_pvalue(a, b, resamples, rng))
    }
}

/// Two-sided permutation p-value for the difference in means. Exhaustive
/// over all labelings when their count is at most `EXACT_ENUMERATION_LIMIT`
/// (the seed is then irrelevant), otherwise Monte-Carlo with the add-one
/// estimator (k+1)/(resamples+1).
pub fn permutation_pvalue(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::substream(seed, stream_names::ANALYSIS, 0);
    permutation_pvalue_with(a, b, resamples, &mut rng)
}

/// Monte-Carlo permutation p-value regardless of problem size — the
/// estimator the automatic path switches to above the enumeration limit,
/// exposed for calibration against exact enumeration.
pub fn permutation_pvalue_sampled(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    validate_permutation_inputs(a, b)?;
    if resamples == 0 {
        return Err(Error::validation("resample count must be positive"));
    }
    if pooled_variance_is_zero(a, b) {
        return Ok(1.0);
    }
    let mut rng = rng::substream(seed, stream_names::ANALYSIS, 0);
    Ok(sampled_pvalue(a, b, resamples, &mut rng))
}

/// Per-beneficiary question scores, keyed for pair lookups.
pub type ScoreTable = BTreeMap<BeneficiaryId, BTreeMap<String, f64>>;

pub fn score_table(rows: &[ScoreRow]) -> ScoreTable {
    let mut table: ScoreTable = BTreeMap::new();
    for row in rows {
        table
            .entry(row.beneficiary_id)
            .or_default()
            .insert(row.question_id.clone(), row.score);
    }
    table
}

/// One question's across-arm comparison. Statistics are `None` when fewer
/// than two usable pairs survive for the question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub question_id: String,
    pub n_pairs: usize,
    pub control: Option<GroupStats>,
    pub intervention: Option<GroupStats>,
    /// 100 · (intervention − control) / control, when the control mean is
    /// positive.
    pub improvement_pct: Option<f64>,
    pub p_value: Option<f64>,
}

fn paired_scores(
    matched: &MatchedPairSet,
    scores: &ScoreTable,
    question_id: &str,
) -> (Vec<f64>, Vec<f64>, usize) {
    let mut intervention = Vec::new();
    let mut control = Vec::new();
    let mut dropped = 0usize;
    for pair in &matched.pairs {
        let lookup = |id: BeneficiaryId| -> Option<f64> {
            scores.get(&id).and_then(|q| q.get(question_id)).copied()
        };
        match (lookup(pair.intervention_id), lookup(pair.control_id)) {
            (Some(i), Some(c)) => {
                intervention.push(i);
                control.push(c);
            }
            _ => dropped += 1,
        }
    }
    (intervention, control, dropped)
}

/// Compare matched intervention and control scores question by question:
/// per-arm means with standard errors, percentage improvement, and a
/// permutation p-value from a per-question random stream.
pub fn compare_scores(
    questionnaire: &Questionnaire,
    matched: &MatchedPairSet,
    scores: &ScoreTable,
    resamples: usize,
    seed: u64,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(questionnaire.questions.len());
    for (position, question) in questionnaire.questions.iter().enumerate() {
        let (intervention, control, dropped) =
            paired_scores(matched, scores, &question.question_id);
        if dropped > 0 {
            log::debug!(
                "question {}: dropped {dropped} pairs missing a score",
                question.question_id
            );
        }
        if intervention.len() < 2 {
            rows.push(ComparisonRow {
                question_id: question.question_id.clone(),
                n_pairs: intervention.len(),
                control: None,
                intervention: None,
                improvement_pct: None,
                p_value: None,
            });
            continue;
        }
        let control_stats = group_stats(&control).expect("nonempty");
        let intervention_stats = group_stats(&intervention).expect("nonempty");
        let improvement_pct = (control_stats.mean > 0.0).then(|| {
            100.0 * (intervention_stats.mean - control_stats.mean) / control_stats.mean
        });
        // Qualifier 0 is the standalone entry point; questions start at 1.
        let mut rng =
            rng::substream(seed, stream_names::ANALYSIS, 1 + position as u64);
        let p_value =
            permutation_pvalue_with(&intervention, &control, resamples, &mut rng)?;
        rows.push(ComparisonRow {
            question_id: question.question_id.clone(),
            n_pairs: intervention.len(),
            control: Some(control_stats),
            intervention: Some(intervention_stats),
            improvement_pct,
            p_value: Some(p_value),
        });
    }
    Ok(rows)
}

/// Score comparison restricted to pairs in which both members were
/// (shadow-)intervened by the given week — one row per (week, question).
/// Means only; the weekly subsets skip the permutation test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeScoreRow {
    pub week: Week,
    pub question_id: String,
    pub n_pairs: usize,
    pub control_mean: Option<f64>,
    pub intervention_mean: Option<f64>,
    pub improvement_pct: Option<f64>,
}

pub fn compare_scores_cumulative(
    questionnaire: &Questionnaire,
    matched: &MatchedPairSet,
    scores: &ScoreTable,
    weeks: &[Week],
) -> Vec<CumulativeScoreRow> {
    let mut rows = Vec::new();
    for &week in weeks {
        let subset = MatchedPairSet {
            pairs: matched
                .pairs
                .iter()
                .filter(|p| p.intervention_week <= week && p.control_week <= week)
                .copied()
                .collect(),
            threshold: matched.threshold,
            unmatched_intervention: Vec::new(),
            unmatched_control: Vec::new(),
        };
        for question in &questionnaire.questions {
            let (intervention, control, _) =
                paired_scores(&subset, scores, &question.question_id);
            let n_pairs = intervention.len();
            let (control_mean, intervention_mean, improvement_pct) = if n_pairs < 2 {
                (None, None, None)
            } else {
                let c = mean(&control);
                let i = mean(&intervention);
                let pct = (c > 0.0).then(|| 100.0 * (i - c) / c);
                (Some(c), Some(i), pct)
            };
            rows.push(CumulativeScoreRow {
                week,
                question_id: question.question_id.clone(),
                n_pairs,
                control_mean,
                intervention_mean,
                improvement_pct,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{Question, QuestionKind, QuestionOption};

    fn candidates(cohort_id: u32, base_id: u64, indices: &[f64]) -> Vec<MatchCandidate> {
        indices
            .iter()
            .enumerate()
            .map(|(i, &index)| MatchCandidate {
                beneficiary_id: BeneficiaryId(base_id + i as u64),
                cohort_id,
                index,
                scheduled_week: 10,
            })
            .collect()
    }

    fn paired_indices(set: &MatchedPairSet, side_i: &[MatchCandidate], side_c: &[MatchCandidate]) -> Vec<(f64, f64)> {
        let find = |side: &[MatchCandidate], id: BeneficiaryId| {
            side.iter().find(|m| m.beneficiary_id == id).unwrap().index
        };
        set.pairs
            .iter()
            .map(|p| (find(side_i, p.intervention_id), find(side_c, p.control_id)))
            .collect()
    }

    #[test]
    fn greedy_trace_matches_frozen_example() {
        let side_i = candidates(1, 0, &[0.95, 0.90, 0.50]);
        let side_c = candidates(1, 100, &[0.945, 0.60, 0.499]);
        let set = match_counterfactual(&side_i, &side_c, 0.01).unwrap();
        assert_eq!(
            paired_indices(&set, &side_i, &side_c),
            vec![(0.95, 0.945), (0.50, 0.499)]
        );
        assert_eq!(set.unmatched_intervention, vec![BeneficiaryId(1)]);
        assert_eq!(set.unmatched_control, vec![BeneficiaryId(101)]);
        for pair in &set.pairs {
            assert!(pair.index_gap <= 0.01);
        }
    }

    #[test]
    fn identical_index_multisets_match_perfectly() {
        let side_i = candidates(1, 0, &[0.8, 0.5, 0.3]);
        let side_c = candidates(1, 100, &[0.3, 0.8, 0.5]);
        let set = match_counterfactual(&side_i, &side_c, 0.01).unwrap();
        assert_eq!(set.pairs.len(), 3);
        assert!(set.pairs.iter().all(|p| p.index_gap == 0.0));
        assert!(set.unmatched_intervention.is_empty());
        assert!(set.unmatched_control.is_empty());
    }

    #[test]
    fn threshold_excludes_wide_gaps() {
        let side_i = candidates(1, 0, &[0.90]);
        let side_c = candidates(1, 100, &[0.92]);
        let set = match_counterfactual(&side_i, &side_c, 0.01).unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.unmatched_intervention.len(), 1);
        assert_eq!(set.unmatched_control.len(), 1);
    }

    #[test]
    fn matching_respects_cohort_boundaries() {
        let side_i = candidates(1, 0, &[0.5]);
        let side_c = candidates(2, 100, &[0.5]);
        let set = match_counterfactual(&side_i, &side_c, 0.01).unwrap();
        assert!(set.pairs.is_empty());
    }

    #[test]
    fn empty_side_leaves_other_unmatched() {
        let side_c = candidates(1, 100, &[0.4, 0.2]);
        let set = match_counterfactual(&[], &side_c, 0.01).unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.unmatched_control.len(), 2);
        assert!(match_counterfactual(&[], &side_c, 0.0).is_err());
    }

    #[test]
    fn matching_is_symmetric() {
        let side_a = candidates(1, 0, &[0.95, 0.90, 0.50, 0.31]);
        let side_b = candidates(1, 100, &[0.945, 0.60, 0.499]);
        let forward = match_counterfactual(&side_a, &side_b, 0.01).unwrap();
        let backward = match_counterfactual(&side_b, &side_a, 0.01).unwrap();
        let swap: Vec<(BeneficiaryId, BeneficiaryId)> = backward
            .pairs
            .iter()
            .map(|p| (p.control_id, p.intervention_id))
            .collect();
        let original: Vec<(BeneficiaryId, BeneficiaryId)> = forward
            .pairs
            .iter()
            .map(|p| (p.intervention_id, p.control_id))
            .collect();
        assert_eq!(swap, original);
    }

    fn flat_history(id: BeneficiaryId, weeks: std::ops::Range<Week>, seconds: u32) -> Vec<CallRecord> {
        weeks
            .map(|week| CallRecord {
                beneficiary_id: id,
                week,
                answered: seconds > 0,
                seconds_listened: seconds,
            })
            .collect()
    }

    #[test]
    fn constant_listening_has_zero_gain() {
        let id = BeneficiaryId(0);
        let history = flat_history(id, 0..20, 60);
        let record = listenership_gain(id, &history, 10, 8);
        assert_eq!(record.gain, 0.0);
        assert_eq!(record.pre_avg, 60.0);
        assert_eq!(record.post_avg, 60.0);
    }

    #[test]
    fn listening_drop_is_a_negative_gain() {
        let id = BeneficiaryId(0);
        let mut history = flat_history(id, 2..10, 60);
        history.extend(flat_history(id, 10..18, 30));
        let record = listenership_gain(id, &history, 10, 8);
        assert_eq!(record.gain, -30.0);
        // A member with no calls at all sits at zero.
        let empty = listenership_gain(id, &[], 10, 8);
        assert_eq!((empty.pre_avg, empty.post_avg, empty.gain), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gain_windows_are_half_open_around_the_intervention() {
        let id = BeneficiaryId(0);
        // One call the week before, one the week of the intervention.
        let history = vec![
            CallRecord { beneficiary_id: id, week: 9, answered: true, seconds_listened: 40 },
            CallRecord { beneficiary_id: id, week: 10, answered: true, seconds_listened: 80 },
        ];
        let record = listenership_gain(id, &history, 10, 8);
        assert_eq!(record.pre_avg, 40.0);
        assert_eq!(record.post_avg, 80.0);
    }

    fn gain(week: Week, value: f64) -> GainRecord {
        GainRecord {
            beneficiary_id: BeneficiaryId(week as u64 * 100 + (value.abs() as u64)),
            pre_avg: 0.0,
            post_avg: value,
            gain: value,
            intervention_week: week,
        }
    }

    #[test]
    fn curve_balances_opposing_gains_to_zero() {
        let gains = vec![gain(1, 10.0), gain(1, -10.0)];
        assert_eq!(cumulative_gain_curve(&gains, &[1]), vec![0.0]);
    }

    #[test]
    fn curve_is_a_running_sum_of_weekly_means() {
        let gains = vec![
            gain(1, 2.0),
            gain(2, -1.0),
            gain(3, 4.0),
        ];
        assert_eq!(cumulative_gain_curve(&gains, &[1, 2, 3]), vec![2.0, 1.0, 5.0]);
        // A week with no intervened members holds the running value.
        assert_eq!(
            cumulative_gain_curve(&gains, &[1, 2, 3, 4]),
            vec![2.0, 1.0, 5.0, 5.0]
        );
        // Gains from skipped grid weeks still land in the next entry.
        assert_eq!(cumulative_gain_curve(&gains, &[2, 3]), vec![1.0, 5.0]);
    }

    #[test]
    fn identical_lists_give_pvalue_one() {
        let a = [0.2, 0.4, 0.9];
        assert_eq!(permutation_pvalue(&a, &a, 1000, 7).unwrap(), 1.0);
    }

    #[test]
    fn three_versus_three_extreme_split_is_exactly_tenth() {
        let a = [1.0, 1.0, 1.0];
        let b = [0.0, 0.0, 0.0];
        let p = permutation_pvalue(&a, &b, 1000, 7).unwrap();
        assert!((p - 0.1).abs() < 1e-12, "expected 2/20, got {p}");
    }

    #[test]
    fn zero_variance_short_circuits_to_one() {
        let a = [0.5, 0.5];
        let b = [0.5, 0.5, 0.5];
        assert_eq!(permutation_pvalue(&a, &b, 10, 3).unwrap(), 1.0);
        assert_eq!(permutation_pvalue_sampled(&a, &b, 10, 3).unwrap(), 1.0);
    }

    #[test]
    fn exact_path_ignores_seed_and_sampled_path_is_reproducible() {
        let a = [0.9, 0.1, 0.6, 0.3];
        let b = [0.2, 0.8, 0.4];
        let p1 = permutation_pvalue(&a, &b, 50, 1).unwrap();
        let p2 = permutation_pvalue(&a, &b, 50, 999).unwrap();
        assert_eq!(p1, p2);

        let s1 = permutation_pvalue_sampled(&a, &b, 20_000, 5).unwrap();
        let s2 = permutation_pvalue_sampled(&a, &b, 20_000, 5).unwrap();
        assert_eq!(s1, s2);
        assert!((s1 - p1).abs() < 0.02, "sampled {s1} vs exact {p1}");
    }

    #[test]
    fn permutation_rejects_degenerate_inputs() {
        assert!(permutation_pvalue(&[], &[1.0], 10, 0).is_err());
        assert!(permutation_pvalue(&[1.0], &[], 10, 0).is_err());
        assert!(permutation_pvalue(&[f64::NAN], &[1.0], 10, 0).is_err());
    }

    fn two_option_question(question_id: &str) -> Question {
        Question {
            question_id: question_id.into(),
            kind: QuestionKind::SingleChoice,
            text: "t".into(),
            options: vec![
                QuestionOption { option_id: "yes".into(), weight: 1.0 },
                QuestionOption { option_id: "no".into(), weight: 0.0 },
            ],
        }
    }

    fn pair_set(n: usize) -> MatchedPairSet {
        MatchedPairSet {
            pairs: (0..n)
                .map(|i| MatchedPair {
                    intervention_id: BeneficiaryId(i as u64),
                    control_id: BeneficiaryId(1000 + i as u64),
                    cohort_id: 1,
                    index_gap: 0.0,
                    intervention_week: 10 + (i % 2) as Week,
                    control_week: 10,
                })
                .collect(),
            threshold: 0.01,
            unmatched_intervention: Vec::new(),
            unmatched_control: Vec::new(),
        }
    }

    fn uniform_scores(set: &MatchedPairSet, question_id: &str, i_score: f64, c_score: f64) -> ScoreTable {
        let rows: Vec<ScoreRow> = set
            .pairs
            .iter()
            .flat_map(|p| {
                [
                    ScoreRow {
                        beneficiary_id: p.intervention_id,
                        question_id: question_id.into(),
                        score: i_score,
                    },
                    ScoreRow {
                        beneficiary_id: p.control_id,
                        question_id: question_id.into(),
                        score: c_score,
                    },
                ]
            })
            .collect();
        score_table(&rows)
    }

    #[test]
    fn equal_scores_yield_zero_improvement_and_p_one() {
        let questionnaire = Questionnaire::new(vec![two_option_question("q1")]).unwrap();
        let set = pair_set(6);
        let scores = uniform_scores(&set, "q1", 0.7, 0.7);
        let rows = compare_scores(&questionnaire, &set, &scores, 100, 3).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.n_pairs, 6);
        assert_eq!(row.improvement_pct, Some(0.0));
        assert_eq!(row.p_value, Some(1.0));
    }

    #[test]
    fn improvement_is_computed_from_the_reported_means() {
        let questionnaire = Questionnaire::new(vec![two_option_question("q1")]).unwrap();
        let set = pair_set(4);
        let scores = uniform_scores(&set, "q1", 0.836, 0.766);
        let rows = compare_scores(&questionnaire, &set, &scores, 100, 3).unwrap();
        let row = &rows[0];
        let expected = 100.0 * (0.836 - 0.766) / 0.766;
        assert!((row.improvement_pct.unwrap() - expected).abs() < 1e-12);
        let i = row.intervention.unwrap();
        let c = row.control.unwrap();
        let recomputed = 100.0 * (i.mean - c.mean) / c.mean;
        assert!((row.improvement_pct.unwrap() - recomputed).abs() < 1e-12);
    }

    #[test]
    fn missing_scores_drop_pairs_and_small_questions_get_markers() {
        let questionnaire =
            Questionnaire::new(vec![two_option_question("q1"), two_option_question("q2")])
                .unwrap();
        let set = pair_set(3);
        // q1 scored for all; q2 only for one pair's members.
        let mut rows_input = Vec::new();
        for p in &set.pairs {
            rows_input.push(ScoreRow {
                beneficiary_id: p.intervention_id,
                question_id: "q1".into(),
                score: 1.0,
            });
            rows_input.push(ScoreRow {
                beneficiary_id: p.control_id,
                question_id: "q1".into(),
                score: 0.0,
            });
        }
        rows_input.push(ScoreRow {
            beneficiary_id: set.pairs[0].intervention_id,
            question_id: "q2".into(),
            score: 1.0,
        });
        rows_input.push(ScoreRow {
            beneficiary_id: set.pairs[0].control_id,
            question_id: "q2".into(),
            score: 1.0,
        });
        let scores = score_table(&rows_input);
        let rows = compare_scores(&questionnaire, &set, &scores, 100, 3).unwrap();
        assert_eq!(rows[0].n_pairs, 3);
        assert!(rows[0].p_value.is_some());
        assert_eq!(rows[1].n_pairs, 1);
        assert_eq!(rows[1].control, None);
        assert_eq!(rows[1].p_value, None);
    }

    #[test]
    fn cumulative_rows_restrict_pairs_by_both_weeks() {
        let questionnaire = Questionnaire::new(vec![two_option_question("q1")]).unwrap();
        let set = pair_set(6); // half the pairs intervened at week 10, half at 11
        let scores = uniform_scores(&set, "q1", 1.0, 0.5);
        let rows = compare_scores_cumulative(&questionnaire, &set, &scores, &[10, 11]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].week, 10);
        assert_eq!(rows[0].n_pairs, 3);
        assert_eq!(rows[1].n_pairs, 6);
        assert_eq!(rows[1].improvement_pct, Some(100.0));
    }
}
