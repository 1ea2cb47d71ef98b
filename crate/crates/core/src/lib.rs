//! Restless-bandit intervention scheduling and randomized-trial evaluation.
//!
//! The crate simulates a weekly mHealth program end to end: a synthetic
//! beneficiary population listens to automated calls, a Whittle-index policy
//! schedules a budgeted set of live service-call interventions each week
//! (with a shadow schedule on the control arm), a survey measures health
//! knowledge afterwards, and the analysis matches counterfactual pairs on
//! the Whittle index to estimate listenership and knowledge effects.
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! - [`engagement`] — listening observables: engagement states, windowed
//!   features, listenership averages.
//! - [`bandit`] — per-arm MDPs, value iteration, Whittle indices, top-k
//!   budget policies.
//! - [`survey`] — questionnaire schema and score rules.
//! - [`simcohort`] — synthetic population generation and the weekly world
//!   simulation (the ground-truth oracle).
//! - [`trial`] — cohorts, stratified arm assignment, eligibility, and the
//!   weekly scheduling loop producing the trial log.
//! - [`analyze`] — counterfactual matching, gain curves, permutation tests,
//!   score comparisons.
//! - [`config`] / [`pipeline`] — the experiment file, stage orchestration,
//!   and deterministic artifact output.

pub mod analyze;
pub mod bandit;
pub mod config;
pub mod engagement;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod simcohort;
pub mod survey;
pub mod trial;
pub mod types;

pub use error::{Error, Result};
pub use types::{Arm, BeneficiaryId, Week, WeekRange};
