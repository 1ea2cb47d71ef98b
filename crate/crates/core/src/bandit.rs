//! Per-beneficiary restless-bandit machinery.
//!
//! Each beneficiary is one two-action MDP (action 0 = automated calls
//! only, action 1 = a live service call that week). The planner solves a
//! subsidy-parameterised single-arm problem: acting passively earns the
//! state reward plus a subsidy, acting earns the state reward alone. The
//! Whittle index of a state is the smallest subsidy at which staying
//! passive becomes (weakly) optimal there, found by bisection; each week
//! the scheduler plays the top-k states by index within budget.
//!
//! Solvers are written for any state count even though the program's
//! engagement model is two-state (0 = not engaging, 1 = engaging, reward =
//! state indicator).

use crate::error::{Error, Result};
use crate::types::BeneficiaryId;
use serde::{Deserialize, Serialize};

/// Sup-norm convergence tolerance for value iteration.
pub const VALUE_TOLERANCE: f64 = 1e-10;
/// Sweep budget before value iteration reports divergence.
pub const MAX_SWEEPS: usize = 10_000;
/// Bisection stops when the subsidy bracket is narrower than this.
pub const INDEX_TOLERANCE: f64 = 1e-6;
/// How many times the initial subsidy bracket may be doubled while
/// searching for a sign change.
const MAX_BRACKET_EXPANSIONS: usize = 40;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// A two-action MDP for one beneficiary: transition matrices for the
/// passive and active action, a per-state reward, and a discount factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMdp {
    n_states: usize,
    /// Row-major `n_states x n_states`, row = from-state.
    passive: Vec<f64>,
    active: Vec<f64>,
    rewards: Vec<f64>,
    discount: f64,
}

impl ArmMdp {
    pub fn new(
        passive: Vec<Vec<f64>>,
        active: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let n = rewards.len();
        if n < 2 {
            return Err(Error::validation("an arm MDP needs at least two states"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::validation(format!(
                "discount must lie strictly inside (0, 1), got {discount}"
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::validation("rewards must be finite"));
        }
        let flatten = |name: &str, m: Vec<Vec<f64>>| -> Result<Vec<f64>> {
            if m.len() != n {
                return Err(Error::validation(format!(
                    "{name} transition matrix has {} rows for {n} states",
                    m.len()
                )));
            }
            let mut flat = Vec::with_capacity(n * n);
            for (s, row) in m.into_iter().enumerate() {
                if row.len() != n {
                    return Err(Error::validation(format!(
                        "{name} transition row {s} has {} entries for {n} states",
                        row.len()
                    )));
                }
                let mut sum = 0.0;
                for (t, &p) in row.iter().enumerate() {
                    if !p.is_finite() || p < -ROW_SUM_TOLERANCE || p > 1.0 + ROW_SUM_TOLERANCE {
                        return Err(Error::validation(format!(
                            "{name} transition probability [{s}][{t}] = {p} is outside [0, 1]"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::validation(format!(
                        "{name} transition row {s} sums to {sum}, expected 1"
                    )));
                }
                flat.extend(row);
            }
            Ok(flat)
        };
        Ok(ArmMdp {
            n_states: n,
            passive: flatten("passive", passive)?,
            active: flatten("active", active)?,
            rewards,
            discount,
        })
    }

    /// Standard two-state engagement arm: state 1 is engaging and pays
    /// reward 1, state 0 pays 0. Arguments are the probabilities of being
    /// engaged next week given the current state, per action.
    pub fn two_state(
        passive_engage: f64,
        passive_stay: f64,
        active_engage: f64,
        active_stay: f64,
        discount: f64,
    ) -> Result<Self> {
        let row = |p: f64| vec![1.0 - p, p];
        ArmMdp::new(
            vec![row(passive_engage), row(passive_stay)],
            vec![row(active_engage), row(active_stay)],
            vec![0.0, 1.0],
            discount,
        )
    }

    /// Fit transition matrices from observed counts with additive
    /// smoothing, keeping the given rewards and discount.
    pub fn from_counts(
        counts: &TransitionCounts,
        rewards: Vec<f64>,
        discount: f64,
        smoothing: f64,
    ) -> Result<Self> {
        if rewards.len() != counts.n_states {
            return Err(Error::validation(format!(
                "{} rewards supplied for {} counted states",
                rewards.len(),
                counts.n_states
            )));
        }
        if !smoothing.is_finite() || smoothing < 0.0 {
            return Err(Error::validation(format!(
                "smoothing must be finite and non-negative, got {smoothing}"
            )));
        }
        let n = counts.n_states;
        let estimate = |action: usize| -> Result<Vec<Vec<f64>>> {
            let mut rows = Vec::with_capacity(n);
            for from in 0..n {
                let row = counts.row(action, from);
                let total: u64 = row.iter().sum();
                if total == 0 && smoothing == 0.0 {
                    return Err(Error::validation(format!(
                        "no observed transitions from state {from} under action {action} \
                         and smoothing is zero"
                    )));
                }
                let denom = total as f64 + smoothing * n as f64;
                rows.push(
                    row.iter()
                        .map(|&c| (c as f64 + smoothing) / denom)
                        .collect(),
                );
            }
            Ok(rows)
        };
        ArmMdp::new(estimate(0)?, estimate(1)?, rewards, discount)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Transition row out of `from` under the given action (0 = passive,
    /// 1 = active).
    pub fn row(&self, action: usize, from: usize) -> &[f64] {
        let base = match action {
            0 => &self.passive,
            1 => &self.active,
            _ => panic!("action must be 0 or 1, got {action}"),
        };
        &base[from * self.n_states..(from + 1) * self.n_states]
    }

    fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// Half-width of the initial subsidy bracket used by the index search
    /// and the default indexability grid.
    pub fn subsidy_bound(&self) -> f64 {
        (1.0 + self.max_abs_reward()) / (1.0 - self.discount)
    }
}

/// Observed transition counts for one arm, indexed by action, from-state
/// and to-state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransitionCounts {
    n_states: usize,
    /// `counts[action][from * n + to]`.
    counts: [Vec<u64>; 2],
}

impl TransitionCounts {
    pub fn new(n_states: usize) -> Self {
        TransitionCounts {
            n_states,
            counts: [vec![0; n_states * n_states], vec![0; n_states * n_states]],
        }
    }

    /// Record one observed transition. Indexes must be in range; this is a
    /// programming error otherwise.
    pub fn record(&mut self, action: usize, from: usize, to: usize) {
        assert!(from < self.n_states && to < self.n_states, "state out of range");
        self.counts[action][from * self.n_states + to] += 1;
    }

    pub fn row(&self, action: usize, from: usize) -> &[u64] {
        &self.counts[action][from * self.n_states..(from + 1) * self.n_states]
    }

    pub fn total(&self) -> u64 {
        self.counts[0].iter().sum::<u64>() + self.counts[1].iter().sum::<u64>()
    }
}

/// Converged solution of the subsidy-parameterised Bellman equation.
#[derive(Debug, Clone)]
pub struct ValueSolution {
    /// Optimal state values.
    pub values: Vec<f64>,
    /// Action value of staying passive (includes the subsidy).
    pub q_passive: Vec<f64>,
    /// Action value of acting.
    pub q_active: Vec<f64>,
    /// Sweeps actually used.
    pub sweeps: usize,
    /// Sup-norm residual after each sweep; a contraction argument says
    /// consecutive entries shrink by at least the discount factor.
    pub residuals: Vec<f64>,
}

impl ValueSolution {
    /// States where the passive action is optimal, with ties going
    /// passive.
    pub fn passive_set(&self) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&s| self.q_passive[s] >= self.q_active[s])
            .collect()
    }
}

/// Solve the subsidy-`m` problem by value iteration from a zero initial
/// guess. See [`value_iteration_from`] for the warm-started variant.
pub fn value_iteration(mdp: &ArmMdp, subsidy: f64) -> Result<ValueSolution> {
    value_iteration_from(mdp, subsidy, vec![0.0; mdp.n_states()])
}

/// Solve the subsidy-`m` problem starting from a caller-supplied value
/// guess (the fixed point is unique, so the guess only affects sweep
/// count). Fails with [`Error::SolverDiverged`] if the sup-norm residual
/// is still above tolerance after the sweep budget.
pub fn value_iteration_from(mdp: &ArmMdp, subsidy: f64, initial: Vec<f64>) -> Result<ValueSolution> {
    let n = mdp.n_states();
    if initial.len() != n {
        return Err(Error::validation(format!(
            "initial value guess has {} entries for {n} states",
            initial.len()
        )));
    }
    if !subsidy.is_finite() {
        return Err(Error::validation(format!("subsidy must be finite, got {subsidy}")));
    }
    let gamma = mdp.discount();
    let mut v = initial;
    let mut next = vec![0.0; n];
    let mut residuals = Vec::new();
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut residual = 0.0_f64;
        for s in 0..n {
            let qp = mdp.rewards()[s] + subsidy + gamma * dot(mdp.row(0, s), &v);
            let qa = mdp.rewards()[s] + gamma * dot(mdp.row(1, s), &v);
            let value = qp.max(qa);
            residual = residual.max((value - v[s]).abs());
            next[s] = value;
        }
        std::mem::swap(&mut v, &mut next);
        residuals.push(residual);
        if residual < VALUE_TOLERANCE {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::SolverDiverged { residual, sweeps });
        }
    }
    let mut q_passive = vec![0.0; n];
    let mut q_active = vec![0.0; n];
    for s in 0..n {
        q_passive[s] = mdp.rewards()[s] + subsidy + gamma * dot(mdp.row(0, s), &v);
        q_active[s] = mdp.rewards()[s] + gamma * dot(mdp.row(1, s), &v);
    }
    Ok(ValueSolution {
        values: v,
        q_passive,
        q_active,
        sweeps,
        residuals,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How much the passive action is preferred in `state` at the given
/// subsidy. Non-negative means passive is (weakly) optimal there.
fn passive_margin(mdp: &ArmMdp, state: usize, subsidy: f64, warm: &mut Vec<f64>) -> Result<f64> {
    let solution = value_iteration_from(mdp, subsidy, warm.clone())?;
    *warm = solution.values.clone();
    Ok(solution.q_passive[state] - solution.q_active[state])
}

/// Whittle index of one state: the smallest subsidy at which the passive
/// action becomes weakly optimal in that state, located by bisection to
/// within [`INDEX_TOLERANCE`].
///
/// The initial bracket spans `±(1 + max |reward|) / (1 - discount)` and is
/// doubled outward until the passive margin changes sign;
/// [`Error::UnbracketedIndex`] reports a margin that never crosses zero.
pub fn whittle_index(mdp: &ArmMdp, state: usize) -> Result<f64> {
    if state >= mdp.n_states() {
        return Err(Error::validation(format!(
            "state {state} out of range for {}-state arm",
            mdp.n_states()
        )));
    }
    let bound = mdp.subsidy_bound();
    let mut lo = -bound;
    let mut hi = bound;
    let mut warm = vec![0.0; mdp.n_states()];

    // At a sufficiently negative subsidy acting should win (margin < 0);
    // at a sufficiently positive one passivity should (margin >= 0).
    let mut expansions = 0;
    while passive_margin(mdp, state, lo, &mut warm)? >= 0.0 {
        expansions += 1;
        if expansions > MAX_BRACKET_EXPANSIONS {
            return Err(Error::UnbracketedIndex { state, lo, hi });
        }
        lo *= 2.0;
    }
    expansions = 0;
    while passive_margin(mdp, state, hi, &mut warm)? < 0.0 {
        expansions += 1;
        if expansions > MAX_BRACKET_EXPANSIONS {
            return Err(Error::UnbracketedIndex { state, lo, hi });
        }
        hi *= 2.0;
    }

    while hi - lo >= INDEX_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if passive_margin(mdp, state, mid, &mut warm)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Evenly spaced subsidy grid across the arm's bracket, for indexability
/// checks.
pub fn default_subsidy_grid(mdp: &ArmMdp, points: usize) -> Vec<f64> {
    let bound = mdp.subsidy_bound();
    let points = points.max(2);
    (0..points)
        .map(|i| -bound + 2.0 * bound * i as f64 / (points - 1) as f64)
        .collect()
}

/// Check indexability on an explicit subsidy grid: the set of states where
/// passive is optimal (ties passive) must grow monotonically as the
/// subsidy increases. Returns `Ok(true)` when it does.
pub fn check_indexability(mdp: &ArmMdp, subsidy_grid: &[f64]) -> Result<bool> {
    Ok(indexability_violation(mdp, subsidy_grid)?.is_none())
}

/// Like [`check_indexability`] but returning the first adjacent grid pair
/// where the passive set lost a state, if any.
pub fn indexability_violation(mdp: &ArmMdp, subsidy_grid: &[f64]) -> Result<Option<(f64, f64)>> {
    if subsidy_grid.len() < 2 {
        return Err(Error::validation(
            "indexability check needs at least two subsidy grid points",
        ));
    }
    if subsidy_grid.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::validation(
            "subsidy grid must be strictly ascending",
        ));
    }
    let mut warm = vec![0.0; mdp.n_states()];
    let mut previous: Option<(f64, Vec<usize>)> = None;
    for &subsidy in subsidy_grid {
        let solution = value_iteration_from(mdp, subsidy, warm.clone())?;
        warm = solution.values.clone();
        let passive = solution.passive_set();
        if let Some((prev_subsidy, prev_set)) = &previous {
            let lost = prev_set.iter().any(|s| !passive.contains(s));
            if lost {
                return Ok(Some((*prev_subsidy, subsidy)));
            }
        }
        previous = Some((subsidy, passive));
    }
    Ok(None)
}

/// Verify indexability, turning a violation into [`Error::NotIndexable`].
pub fn verify_indexable(mdp: &ArmMdp, subsidy_grid: &[f64]) -> Result<()> {
    match indexability_violation(mdp, subsidy_grid)? {
        None => Ok(()),
        Some((at, next)) => Err(Error::NotIndexable { at, next }),
    }
}

/// One candidate for this week's budgeted selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhittleIndexValue {
    pub beneficiary_id: BeneficiaryId,
    pub state: usize,
    pub index: f64,
}

/// Pick the `budget` candidates with the highest indices; ties break
/// toward the lower beneficiary id, and a short candidate list is returned
/// whole. The input order never affects the result.
pub fn select_top_k(candidates: &[WhittleIndexValue], budget: usize) -> Vec<BeneficiaryId> {
    let mut ranked: Vec<&WhittleIndexValue> = candidates.iter().collect();
    ranked.sort_by(|a, b| {
        b.index
            .total_cmp(&a.index)
            .then_with(|| a.beneficiary_id.cmp(&b.beneficiary_id))
    });
    ranked
        .into_iter()
        .take(budget)
        .map(|c| c.beneficiary_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Reference arm used across the solver tests: sticky passive decay,
    /// strong active push toward the engaging state.
    fn reference_arm() -> ArmMdp {
        ArmMdp::new(
            vec![vec![0.9, 0.1], vec![0.3, 0.7]],
            vec![vec![0.6, 0.4], vec![0.1, 0.9]],
            vec![0.0, 1.0],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn constructor_rejects_bad_rows_and_discounts() {
        let bad_row = ArmMdp::new(
            vec![vec![0.9, 0.2], vec![0.3, 0.7]],
            vec![vec![0.6, 0.4], vec![0.1, 0.9]],
            vec![0.0, 1.0],
            0.9,
        );
        assert!(bad_row.is_err());
        let bad_discount = ArmMdp::two_state(0.1, 0.7, 0.4, 0.9, 1.0);
        assert!(bad_discount.is_err());
        let negative_p = ArmMdp::new(
            vec![vec![1.1, -0.1], vec![0.3, 0.7]],
            vec![vec![0.6, 0.4], vec![0.1, 0.9]],
            vec![0.0, 1.0],
            0.9,
        );
        assert!(negative_p.is_err());
    }

    /// At zero subsidy the always-act policy is optimal for the reference
    /// arm and its value solves to (72/11, 92/11) exactly.
    #[test]
    fn value_iteration_matches_direct_policy_solution() {
        let mdp = reference_arm();
        let solution = value_iteration(&mdp, 0.0).unwrap();
        assert_abs_diff_eq!(solution.values[0], 72.0 / 11.0, epsilon = 1e-8);
        assert_abs_diff_eq!(solution.values[1], 92.0 / 11.0, epsilon = 1e-8);
        assert!(solution.q_active[0] > solution.q_passive[0]);
        assert!(solution.q_active[1] > solution.q_passive[1]);
        assert!(*solution.residuals.last().unwrap() < VALUE_TOLERANCE);
    }

    #[test]
    fn whittle_indices_match_reference_values() {
        let mdp = reference_arm();
        // Independently computed by scanning the passive margin over a
        // 1e-4 subsidy grid.
        assert_abs_diff_eq!(whittle_index(&mdp, 0).unwrap(), 0.58695652, epsilon = 1e-5);
        assert_abs_diff_eq!(whittle_index(&mdp, 1).unwrap(), 0.32727273, epsilon = 1e-5);
    }

    /// When both actions have identical dynamics the subsidy is the whole
    /// difference, so every index is zero and ties resolve passive.
    #[test]
    fn identical_actions_have_zero_index_and_tie_passive() {
        let mdp = ArmMdp::new(
            vec![vec![0.8, 0.2], vec![0.4, 0.6]],
            vec![vec![0.8, 0.2], vec![0.4, 0.6]],
            vec![0.0, 1.0],
            0.9,
        )
        .unwrap();
        for state in 0..2 {
            assert_abs_diff_eq!(whittle_index(&mdp, state).unwrap(), 0.0, epsilon = 1e-6);
        }
        let solution = value_iteration(&mdp, 0.0).unwrap();
        assert_eq!(solution.passive_set(), vec![0, 1]);
    }

    #[test]
    fn reference_arm_is_indexable_on_default_grid() {
        let mdp = reference_arm();
        let grid = default_subsidy_grid(&mdp, 201);
        assert!(check_indexability(&mdp, &grid).unwrap());
        verify_indexable(&mdp, &grid).unwrap();
    }

    #[test]
    fn top_k_orders_by_index_then_id() {
        let c = |id: u64, state: usize, index: f64| WhittleIndexValue {
            beneficiary_id: BeneficiaryId(id),
            state,
            index,
        };
        let candidates = vec![
            c(5, 1, 0.4),
            c(2, 0, 0.9),
            c(9, 1, 0.9),
            c(1, 0, 0.1),
        ];
        let picked = select_top_k(&candidates, 3);
        assert_eq!(
            picked,
            vec![BeneficiaryId(2), BeneficiaryId(9), BeneficiaryId(5)]
        );
        // Short lists come back whole.
        assert_eq!(select_top_k(&candidates, 10).len(), 4);
        assert_eq!(select_top_k(&candidates, 0).len(), 0);
    }

    #[test]
    fn counts_fit_with_additive_smoothing() {
        let mut counts = TransitionCounts::new(2);
        for _ in 0..3 {
            counts.record(0, 0, 0);
        }
        counts.record(0, 0, 1);
        counts.record(0, 1, 1);
        counts.record(1, 0, 1);
        counts.record(1, 1, 1);
        let mdp = ArmMdp::from_counts(&counts, vec![0.0, 1.0], 0.9, 1.0).unwrap();
        assert_abs_diff_eq!(mdp.row(0, 0)[0], 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mdp.row(0, 0)[1], 2.0 / 6.0, epsilon = 1e-12);
        // Unseen rows fall back to uniform under smoothing…
        assert_abs_diff_eq!(mdp.row(0, 1)[0], 1.0 / 3.0, epsilon = 1e-12);
        // …and error without it.
        let mut empty = TransitionCounts::new(2);
        empty.record(0, 0, 0);
        assert!(ArmMdp::from_counts(&empty, vec![0.0, 1.0], 0.9, 0.0).is_err());
    }
}
