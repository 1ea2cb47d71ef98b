//! The three-stage pipeline behind the command-line interface.
//!
//! `simulate` generates the population, runs the randomized trial, and
//! persists everything downstream stages need; `analyze` reloads those
//! artifacts (never the in-memory structures, so every run exercises the
//! replay path), matches counterfactual pairs, and writes the comparison
//! tables; `report` renders the tables into a plain-text summary without
//! recomputing any statistic. Each stage folds the files it wrote into
//! `manifest.json`, keyed by the effective config's hash — running the
//! same config twice yields byte-identical manifests.

use crate::analyze::{
    compare_scores, compare_scores_cumulative, cumulative_gain_curve, listenership_gain,
    match_counterfactual, pickup_candidates, responder_candidates, score_table, GainRecord,
};
use crate::config::ExperimentConfig;
use crate::engagement::CallRecord;
use crate::error::{Error, Result};
use crate::io::{self, ComparisonCsvRow, CurvePoint, FunnelRow, GainRow, Manifest};
use crate::simcohort::{generate_population, Beneficiary, LatentProfile, Population};
use crate::survey::{Questionnaire, ScoreRow};
use crate::trial::{funnel_counts, run_trial, Cohort};
use crate::types::{Arm, BeneficiaryId, Week};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Artifact locations inside one run's output directory.
#[derive(Debug, Clone)]
pub struct StagePaths {
    out_dir: PathBuf,
}

impl StagePaths {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        StagePaths {
            out_dir: out_dir.into(),
        }
    }

    pub fn for_config(config: &ExperimentConfig) -> Self {
        StagePaths::new(&config.experiment.output_dir)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn join(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    // simulate
    pub fn population(&self) -> PathBuf {
        self.join("population.csv")
    }
    pub fn profiles(&self) -> PathBuf {
        self.join("profiles.csv")
    }
    pub fn assignments(&self) -> PathBuf {
        self.join("assignments.csv")
    }
    pub fn calls(&self) -> PathBuf {
        self.join("calls.csv")
    }
    pub fn trial_log(&self) -> PathBuf {
        self.join("trial_log.ndjson")
    }
    pub fn responses(&self) -> PathBuf {
        self.join("responses.csv")
    }
    pub fn scores(&self) -> PathBuf {
        self.join("scores.csv")
    }

    // analyze
    pub fn matched_pairs(&self) -> PathBuf {
        self.join("matched_pairs.csv")
    }
    pub fn gain_pairs(&self) -> PathBuf {
        self.join("gain_pairs.csv")
    }
    pub fn gains(&self) -> PathBuf {
        self.join("gains.csv")
    }
    pub fn gain_curve(&self) -> PathBuf {
        self.join("gain_curve.csv")
    }
    pub fn score_comparison(&self) -> PathBuf {
        self.join("score_comparison.csv")
    }
    pub fn cumulative_scores(&self) -> PathBuf {
        self.join("cumulative_scores.csv")
    }
    pub fn funnel(&self) -> PathBuf {
        self.join("funnel.csv")
    }

    // report
    pub fn report(&self) -> PathBuf {
        self.join("report.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.join("manifest.json")
    }
}

/// Resolve the questionnaire named by the config: the embedded default or
/// a text file next to the config.
pub fn questionnaire_for(config: &ExperimentConfig) -> Result<Questionnaire> {
    match config.questionnaire_path() {
        None => Ok(io::default_questionnaire()),
        Some(path) => io::load_questionnaire(&path),
    }
}

fn require(path: &Path, producing_stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            stage: producing_stage.to_string(),
        })
    }
}

fn load_manifest_for(config: &ExperimentConfig, paths: &StagePaths) -> Result<Manifest> {
    require(&paths.manifest(), "simulate")?;
    let manifest = io::read_manifest(&paths.manifest())?;
    if !manifest.matches_config(config) {
        return Err(Error::config(format!(
            "{} was produced by a different config; rerun the simulate stage",
            paths.manifest().display()
        )));
    }
    Ok(manifest)
}

/// Generate the population, run the trial, and write every artifact the
/// later stages read. Starts a fresh manifest for the run.
pub fn stage_simulate(config: &ExperimentConfig) -> Result<()> {
    let paths = StagePaths::for_config(config);
    std::fs::create_dir_all(paths.out_dir())
        .map_err(|e| Error::io(paths.out_dir().display().to_string(), e))?;

    let questionnaire = questionnaire_for(config)?;
    let population = generate_population(config);
    log::info!(
        "simulate: {} members across {} cohorts, horizon {} weeks",
        population.len(),
        population.cohorts.len(),
        config.horizon()
    );
    let output = run_trial(&population, &questionnaire, config)?;
    let scores = questionnaire.score_all(&output.responses)?;

    io::write_csv(&paths.population(), &population.beneficiaries)?;
    io::write_csv(&paths.profiles(), &population.profiles)?;
    io::write_csv(&paths.assignments(), &output.assignments)?;
    io::write_csv(&paths.calls(), output.world.all_calls())?;
    io::write_trial_log(&paths.trial_log(), &output.log)?;
    io::write_responses(&paths.responses(), &output.responses)?;
    io::write_csv(&paths.scores(), &scores)?;

    let mut manifest = Manifest::new(config);
    for path in [
        paths.population(),
        paths.profiles(),
        paths.assignments(),
        paths.calls(),
        paths.trial_log(),
        paths.responses(),
        paths.scores(),
    ] {
        manifest.record_artifact(&path)?;
    }
    io::write_manifest(&paths.manifest(), &manifest)
}

/// Rebuild the population from its persisted parts plus the config's
/// cohort definitions.
fn load_population(config: &ExperimentConfig, paths: &StagePaths) -> Result<Population> {
    let beneficiaries: Vec<Beneficiary> = io::read_csv(&paths.population())?;
    let profiles: Vec<LatentProfile> = io::read_csv(&paths.profiles())?;

    let mut members: BTreeMap<u32, Vec<BeneficiaryId>> = config
        .cohorts
        .iter()
        .map(|spec| (spec.cohort_id, Vec::new()))
        .collect();
    for beneficiary in &beneficiaries {
        members
            .get_mut(&beneficiary.cohort_id)
            .ok_or_else(|| {
                Error::format(
                    paths.population().display().to_string(),
                    format!(
                        "beneficiary {} belongs to cohort {}, which the config does not define",
                        beneficiary.id, beneficiary.cohort_id
                    ),
                )
            })?
            .push(beneficiary.id);
    }
    let cohorts = config
        .cohorts
        .iter()
        .map(|spec| Cohort {
            cohort_id: spec.cohort_id,
            registration_window: spec.registration_window(),
            intervention_window: spec.intervention_window(),
            member_ids: members.remove(&spec.cohort_id).expect("seeded above"),
        })
        .collect();
    Population::from_parts(beneficiaries, profiles, cohorts)
}

fn load_histories(path: &Path, population_size: usize) -> Result<Vec<Vec<CallRecord>>> {
    let mut histories = vec![Vec::new(); population_size];
    for record in io::read_calls(path)? {
        let index = record.beneficiary_id.index();
        if index >= population_size {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "call record for beneficiary {} outside the population of {}",
                    record.beneficiary_id, population_size
                ),
            ));
        }
        histories[index].push(record);
    }
    Ok(histories)
}

/// Weeks in any cohort's intervention window, ascending.
fn intervention_weeks(config: &ExperimentConfig) -> Vec<Week> {
    let mut weeks: Vec<Week> = config
        .cohorts
        .iter()
        .flat_map(|spec| spec.intervention_window().weeks())
        .collect();
    weeks.sort_unstable();
    weeks.dedup();
    weeks
}

fn gains_for(
    side: impl IntoIterator<Item = (BeneficiaryId, Week)>,
    histories: &[Vec<CallRecord>],
    window_weeks: u32,
) -> Vec<GainRecord> {
    side.into_iter()
        .map(|(id, week)| listenership_gain(id, &histories[id.index()], week, window_weeks))
        .collect()
}

/// Match counterfactual pairs, compute listenership gains and score
/// comparisons from the persisted artifacts, and write the analysis
/// tables.
pub fn stage_analyze(config: &ExperimentConfig) -> Result<()> {
    let paths = StagePaths::for_config(config);
    for input in [
        paths.population(),
        paths.profiles(),
        paths.calls(),
        paths.trial_log(),
        paths.scores(),
    ] {
        require(&input, "simulate")?;
    }
    let mut manifest = load_manifest_for(config, &paths)?;

    let population = load_population(config, &paths)?;
    let histories = load_histories(&paths.calls(), population.len())?;
    let log = io::read_trial_log(&paths.trial_log())?;
    let score_rows: Vec<ScoreRow> = io::read_csv(&paths.scores())?;
    let scores = score_table(&score_rows);
    let questionnaire = questionnaire_for(config)?;
    let threshold = config.experiment.matching_threshold;

    // Listenership effects compare every picked-up intervention member
    // against shadow-scheduled control members.
    let gain_matching = match_counterfactual(
        &pickup_candidates(&log, Arm::Intervention),
        &pickup_candidates(&log, Arm::Control),
        threshold,
    )?;
    let window = config.experiment.gain_window_weeks;
    let intervention_gains = gains_for(
        gain_matching
            .pairs
            .iter()
            .map(|p| (p.intervention_id, p.intervention_week)),
        &histories,
        window,
    );
    let control_gains = gains_for(
        gain_matching
            .pairs
            .iter()
            .map(|p| (p.control_id, p.control_week)),
        &histories,
        window,
    );
    let weeks = intervention_weeks(config);
    let control_curve = cumulative_gain_curve(&control_gains, &weeks);
    let intervention_curve = cumulative_gain_curve(&intervention_gains, &weeks);
    let curve: Vec<CurvePoint> = weeks
        .iter()
        .zip(control_curve.iter().zip(&intervention_curve))
        .map(|(&week, (&control, &intervention))| CurvePoint {
            week,
            control_cumulative: control,
            intervention_cumulative: intervention,
        })
        .collect();

    // Knowledge effects compare matched survey responders.
    let survey_matching = match_counterfactual(
        &responder_candidates(&log, Arm::Intervention),
        &responder_candidates(&log, Arm::Control),
        threshold,
    )?;
    log::info!(
        "analyze: {} gain pairs, {} survey pairs",
        gain_matching.len(),
        survey_matching.len()
    );
    let comparison = compare_scores(
        &questionnaire,
        &survey_matching,
        &scores,
        config.experiment.resamples,
        config.experiment.master_seed,
    )?;
    let cumulative = compare_scores_cumulative(&questionnaire, &survey_matching, &scores, &weeks);
    let funnel = funnel_counts(&population, &log);

    let mut gain_rows: Vec<GainRow> = intervention_gains
        .iter()
        .map(|g| GainRow::new(Arm::Intervention, g))
        .collect();
    gain_rows.extend(control_gains.iter().map(|g| GainRow::new(Arm::Control, g)));

    io::write_csv(&paths.matched_pairs(), &survey_matching.pairs)?;
    io::write_csv(&paths.gain_pairs(), &gain_matching.pairs)?;
    io::write_csv(&paths.gains(), &gain_rows)?;
    io::write_csv(&paths.gain_curve(), &curve)?;
    let comparison_rows: Vec<ComparisonCsvRow> =
        comparison.iter().map(ComparisonCsvRow::from).collect();
    io::write_csv(&paths.score_comparison(), &comparison_rows)?;
    io::write_csv(&paths.cumulative_scores(), &cumulative)?;
    io::write_csv(&paths.funnel(), &FunnelRow::from_counts(&funnel))?;

    for path in [
        paths.matched_pairs(),
        paths.gain_pairs(),
        paths.gains(),
        paths.gain_curve(),
        paths.score_comparison(),
        paths.cumulative_scores(),
        paths.funnel(),
    ] {
        manifest.record_artifact(&path)?;
    }
    io::write_manifest(&paths.manifest(), &manifest)
}

fn fmt_opt(value: Option<f64>, precision: usize) -> String {
    match value {
        Some(v) => format!("{v:.precision$}"),
        None => "--".to_string(),
    }
}

fn fmt_mean_se(mean: Option<f64>, se: Option<f64>) -> String {
    match (mean, se) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "--".to_string(),
    }
}

/// Render the analysis tables into `report.txt`. Everything is read back
/// from the analyze artifacts; nothing is recomputed.
pub fn stage_report(config: &ExperimentConfig) -> Result<()> {
    let paths = StagePaths::for_config(config);
    for input in [
        paths.funnel(),
        paths.gain_curve(),
        paths.score_comparison(),
    ] {
        require(&input, "analyze")?;
    }
    let mut manifest = load_manifest_for(config, &paths)?;

    let funnel: Vec<FunnelRow> = io::read_csv(&paths.funnel())?;
    let curve: Vec<CurvePoint> = io::read_csv(&paths.gain_curve())?;
    let comparison: Vec<ComparisonCsvRow> = io::read_csv(&paths.score_comparison())?;

    let mut text = String::new();
    let w = &mut text;
    writeln!(w, "Intervention scheduling trial report").unwrap();
    writeln!(
        w,
        "seed {}  config {}",
        config.experiment.master_seed,
        &manifest.config_sha256[..12]
    )
    .unwrap();

    writeln!(w, "\n== Attrition funnel ==").unwrap();
    writeln!(w, "{:<22} {:>12} {:>12}", "stage", "intervention", "control").unwrap();
    for row in &funnel {
        writeln!(w, "{:<22} {:>12} {:>12}", row.stage, row.intervention, row.control).unwrap();
    }

    writeln!(w, "\n== Cumulative listenership gain (seconds per week) ==").unwrap();
    writeln!(w, "{:>4} {:>12} {:>12}", "week", "control", "intervention").unwrap();
    for point in &curve {
        writeln!(
            w,
            "{:>4} {:>12.2} {:>12.2}",
            point.week, point.control_cumulative, point.intervention_cumulative
        )
        .unwrap();
    }

    writeln!(w, "\n== Knowledge scores over matched pairs ==").unwrap();
    writeln!(
        w,
        "{:<26} {:>5} {:>15} {:>15} {:>8} {:>9}",
        "question", "pairs", "control", "intervention", "gain%", "p"
    )
    .unwrap();
    for row in &comparison {
        writeln!(
            w,
            "{:<26} {:>5} {:>15} {:>15} {:>8} {:>9}",
            row.question_id,
            row.n_pairs,
            fmt_mean_se(row.control_mean, row.control_se),
            fmt_mean_se(row.intervention_mean, row.intervention_se),
            fmt_opt(row.improvement_pct, 1),
            fmt_opt(row.p_value, 6),
        )
        .unwrap();
    }

    std::fs::write(paths.report(), &text)
        .map_err(|e| Error::io(paths.report().display().to_string(), e))?;
    manifest.record_artifact(&paths.report())?;
    io::write_manifest(&paths.manifest(), &manifest)
}

/// Run simulate, analyze, and report back to back.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<()> {
    stage_simulate(config)?;
    stage_analyze(config)?;
    stage_report(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config(out_dir: &Path, seed: u64) -> ExperimentConfig {
        let text = format!(
            r#"
[experiment]
master_seed = {seed}
output_dir = "{}"
resamples = 200
gain_window_weeks = 2
horizon_padding_weeks = 2

[[cohort]]
cohort_id = 1
size = 120
registration_start = 0
registration_weeks = 2
intervention_start = 6
intervention_weeks = 2
weekly_budget = 8
"#,
            out_dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn pipeline_writes_every_artifact_and_a_complete_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = test_config(dir.path(), 41);
        run_pipeline(&config).unwrap();

        let paths = StagePaths::for_config(&config);
        let artifacts = [
            paths.population(),
            paths.profiles(),
            paths.assignments(),
            paths.calls(),
            paths.trial_log(),
            paths.responses(),
            paths.scores(),
            paths.matched_pairs(),
            paths.gain_pairs(),
            paths.gains(),
            paths.gain_curve(),
            paths.score_comparison(),
            paths.cumulative_scores(),
            paths.funnel(),
            paths.report(),
        ];
        for artifact in &artifacts {
            assert!(artifact.is_file(), "missing {}", artifact.display());
        }
        let manifest = io::read_manifest(&paths.manifest()).unwrap();
        assert_eq!(manifest.artifacts.len(), artifacts.len());
        assert!(manifest.matches_config(&config));

        let report = std::fs::read_to_string(paths.report()).unwrap();
        assert!(report.contains("Attrition funnel"));
        assert!(report.contains("registered"));
        assert!(report.contains("birth-weight-known"));
    }

    #[test]
    fn reruns_into_different_directories_produce_identical_manifests() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_pipeline(&test_config(dir_a.path(), 41)).unwrap();
        run_pipeline(&test_config(dir_b.path(), 41)).unwrap();
        let a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stages_name_the_producer_of_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = test_config(dir.path(), 41);

        let err = stage_analyze(&config).unwrap_err().to_string();
        assert!(err.contains("simulate"), "{err}");

        stage_simulate(&config).unwrap();
        let err = stage_report(&config).unwrap_err().to_string();
        assert!(err.contains("analyze"), "{err}");
    }

    #[test]
    fn analyze_rejects_a_manifest_from_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        stage_simulate(&test_config(dir.path(), 41)).unwrap();
        let err = stage_analyze(&test_config(dir.path(), 42))
            .unwrap_err()
            .to_string();
        assert!(err.contains("different config"), "{err}");
    }
}
