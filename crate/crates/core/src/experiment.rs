//! Seeded experiment runner: sampling, baseline, sliding-window variants, metrics.

use ndarray::Array1;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::{Method, ScenarioConfig, ScenarioKind, SensorLayout};
use crate::error::{CgmError, Result};
use crate::model::HmmModel;
use crate::oracle::ipf_joint_projection;
use crate::oracle::DEFAULT_IPF_TOLERANCE;
use crate::report::{summarize, ExperimentReport, ReportMetadata, ReportRow};
use crate::scenario::{
    grid_transition, initial_clusters, random_hmm, random_sensors, sample_initial, sample_population, seeded_rng,
    sensor_observation, GridWorld, LogLinearWeights, Simulation,
};
use crate::sbp::Observations;
use crate::window::{baseline_full, StepResult, WindowState};

/// Largest allowed l-infinity gap between baseline and oracle marginals.
pub const ORACLE_CHECK_TOL: f64 = 1e-6;

/// `sum |a_i - b_i|`.
pub fn l1_error(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CgmError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Trials on the rayon pool. Without the `parallel` feature this runs sequentially.
    #[default]
    Parallel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub execution: Execution,
    /// Certify baseline marginals against the joint-tensor oracle; fatal on mismatch.
    pub oracle_check: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub trial: usize,
    pub model: u64,
    pub initial: u64,
    pub simulation: u64,
}

/// Seeds of trial `trial`: stream `trial` of the generator keyed by `seed`.
pub fn trial_seeds(seed: u64, trial: usize) -> TrialSeeds {
    let mut rng = seeded_rng(seed);
    rng.set_stream(trial as u64);
    TrialSeeds { trial, model: rng.next_u64(), initial: rng.next_u64(), simulation: rng.next_u64() }
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub seeds: TrialSeeds,
    pub model: HmmModel,
    pub simulation: Simulation,
}

fn degrees(deg: f64) -> f64 {
    deg.to_radians()
}

/// Model and sampled population of one trial.
///
/// Random-HMM trials draw fresh matrices and a multinomial initial population
/// under a uniform prior. Bird-migration trials share the grid model and
/// start from the two clusters; only the movement is resampled.
pub fn build_trial(config: &ScenarioConfig, trial: usize) -> Result<Trial> {
    let seeds = trial_seeds(config.seed, trial);
    let (model, initial) = match config.scenario {
        ScenarioKind::RandomHmm => {
            let (transition, observation) = random_hmm(config.d, seeds.model)?;
            let prior = Array1::from_elem(config.d, 1.0 / config.d as f64);
            let initial = sample_initial(&prior, config.population, seeds.initial)?;
            (HmmModel::new(prior, transition, observation)?, initial)
        }
        ScenarioKind::BirdMigration => {
            let sensors = match &config.sensors {
                SensorLayout::Random(n) => random_sensors(config.grid_size, *n, config.sensor_seed)?,
                SensorLayout::Fixed(cells) => cells.clone(),
            };
            let grid = GridWorld::new(config.grid_size, sensors, degrees(config.wind_deg))?;
            let transition = grid_transition(&grid, &LogLinearWeights::default())?;
            let observation = sensor_observation(&grid, config.lambda)?;
            let initial = initial_clusters(&grid, config.population)?;
            (HmmModel::new(initial.distribution(), transition, observation)?, initial)
        }
    };
    let simulation =
        sample_population(&initial, model.transition(), model.observation(), config.horizon, seeds.simulation)?;
    Ok(Trial { seeds, model, simulation })
}

#[derive(Clone)]
struct Step {
    marginal: Array1<f64>,
    seconds: f64,
    converged: bool,
    sweeps: usize,
}

impl From<StepResult> for Step {
    fn from(s: StepResult) -> Self {
        Self {
            marginal: s.marginal,
            seconds: s.wall_time.as_secs_f64(),
            converged: s.diagnostics.converged,
            sweeps: s.diagnostics.sweeps,
        }
    }
}

type StepSeries = Vec<std::result::Result<Step, String>>;

fn run_window(trial: &Trial, method: Method, config: &ScenarioConfig) -> StepSeries {
    let variant = method.variant().expect("windowed method");
    let k = config.window;
    let obs = &trial.simulation.observations;
    let steps = config.horizon - k;
    let mut out = Vec::with_capacity(steps);
    let mut state = match WindowState::init(trial.model.clone(), variant, k, &obs[..k], config.sbp_options()) {
        Ok((state, _)) => state,
        Err(e) => return vec![Err(format!("window initialization failed: {e}")); steps],
    };
    for y in &obs[k..] {
        match state.advance(y.clone()) {
            Ok(step) => out.push(Ok(step.into())),
            Err(e) => {
                // The stream is broken from here on.
                let msg = e.to_string();
                out.resize(steps, Err(msg));
                break;
            }
        }
    }
    out
}

fn run_baseline(trial: &Trial, config: &ScenarioConfig) -> StepSeries {
    let obs = &trial.simulation.observations;
    (config.window + 1..=config.horizon)
        .map(|t| baseline_full(&trial.model, &obs[..t], config.sbp_options()).map(Step::from).map_err(|e| e.to_string()))
        .collect()
}

/// Compares baseline marginals with the oracle wherever the joint fits in memory.
fn oracle_check(trial: &Trial, config: &ScenarioConfig, baseline: &StepSeries) -> Result<usize> {
    let mut checked = 0;
    for (step, t) in baseline.iter().zip(config.window + 1..) {
        let Ok(step) = step else { continue };
        let graph = trial.model.chain(t)?;
        let obs: Observations = trial.simulation.observations[..t]
            .iter()
            .enumerate()
            .map(|(k, y)| (graph.observation_at(k + 1).expect("leaf"), y.clone()))
            .collect();
        let oracle = match ipf_joint_projection(&graph, &obs, DEFAULT_IPF_TOLERANCE) {
            Ok(r) => r,
            Err(CgmError::Size { .. }) => break,
            Err(e) => return Err(e),
        };
        let node = graph.hidden_at(t).expect("last hidden node");
        let gap = oracle
            .marginals
            .node(node)
            .iter()
            .zip(&step.marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !oracle.converged || gap > ORACLE_CHECK_TOL {
            return Err(CgmError::Validation(format!(
                "oracle check failed for trial {} at t = {t}: gap {gap:e}",
                trial.seeds.trial
            )));
        }
        checked += 1;
    }
    Ok(checked)
}

struct TrialOutcome {
    seeds: TrialSeeds,
    rows: Vec<ReportRow>,
    oracle_checks: usize,
}

fn failed_rows(trial: usize, config: &ScenarioConfig, methods: &[Method], msg: &str) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for t in config.window + 1..=config.horizon {
        for &method in methods {
            rows.push(ReportRow::failed(trial, t, method, msg.to_owned()));
        }
    }
    rows
}

fn run_trial(config: &ScenarioConfig, methods: &[Method], index: usize, check: bool) -> Result<TrialOutcome> {
    let trial = match build_trial(config, index) {
        Ok(t) => t,
        Err(e) => {
            let msg = format!("trial setup failed: {e}");
            return Ok(TrialOutcome {
                seeds: trial_seeds(config.seed, index),
                rows: failed_rows(index, config, methods, &msg),
                oracle_checks: 0,
            });
        }
    };
    // The baseline is the reference metric, so it always runs.
    let baseline = run_baseline(&trial, config);
    let oracle_checks = if check { oracle_check(&trial, config, &baseline)? } else { 0 };

    let mut rows = Vec::new();
    for &method in methods {
        let windowed;
        let series = match method {
            Method::Baseline => &baseline,
            _ => {
                windowed = run_window(&trial, method, config);
                &windowed
            }
        };
        for ((t, step), reference) in (config.window + 1..).zip(series).zip(&baseline) {
            let row = match step {
                Ok(step) => {
                    let truth = trial.simulation.hidden[t - 1].distribution();
                    ReportRow {
                        trial: index,
                        t,
                        method,
                        l1_vs_baseline: reference.as_ref().ok().map(|b| l1_error(&step.marginal, &b.marginal)).transpose()?,
                        l1_vs_truth: Some(l1_error(&step.marginal, &truth)?),
                        step_seconds: step.seconds,
                        converged: step.converged,
                        sweeps: step.sweeps,
                        error: reference.as_ref().err().map(|e| format!("baseline failed: {e}")),
                    }
                }
                Err(e) => ReportRow::failed(index, t, method, e.clone()),
            };
            rows.push(row);
        }
    }
    Ok(TrialOutcome { seeds: trial.seeds, rows, oracle_checks })
}

fn run_trials(
    config: &ScenarioConfig,
    methods: &[Method],
    trials: usize,
    options: RunOptions,
) -> Vec<Result<TrialOutcome>> {
    let f = |k: usize| run_trial(config, methods, k, options.oracle_check);
    match options.execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..trials).into_par_iter().map(f).collect()
        }
        _ => (0..trials).map(f).collect(),
    }
}

/// Runs `methods` on `trials` seeded trials of `config` and collects the report.
///
/// Per-step failures become rows with an error message; only configuration
/// problems and oracle-check failures abort the run.
pub fn run_experiment(
    config: &ScenarioConfig,
    methods: &[Method],
    trials: usize,
    options: RunOptions,
) -> Result<ExperimentReport> {
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let mut config = config.clone();
    config.methods = methods.clone();
    config.trials = trials;
    config.validate()?;

    let mut seeds = Vec::with_capacity(trials);
    let mut rows = Vec::new();
    let mut oracle_checks = 0;
    for outcome in run_trials(&config, &methods, trials, options) {
        let outcome = outcome?;
        seeds.push(outcome.seeds);
        rows.extend(outcome.rows);
        oracle_checks += outcome.oracle_checks;
    }
    if options.oracle_check && oracle_checks == 0 {
        return Err(CgmError::Config("oracle check requested but no time step fits the oracle size guard".into()));
    }
    rows.sort_by_key(|r| (r.trial, r.t, r.method));
    let summary = summarize(&rows);
    let metadata = ReportMetadata::new(config, seeds, options.oracle_check.then_some(oracle_checks));
    Ok(ExperimentReport { metadata, rows, summary })
}

/// [`run_experiment`] with the methods and trial count from the config.
pub fn run_config(config: &ScenarioConfig, options: RunOptions) -> Result<ExperimentReport> {
    run_experiment(config, &config.methods, config.trials, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn l1_examples() {
        let a = array![0.6, 0.4];
        assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_error(&array![1.0, 0.0], &array![0.0, 1.0]).unwrap(), 2.0);
        assert!((l1_error(&a, &array![0.5, 0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(l1_error(&a, &array![1.0]), Err(CgmError::LengthMismatch { .. })));
    }

    fn small(methods: &str) -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.apply_overrides(&["d=3", "M=200", "T=10", "K=3", "trials=1", &format!("methods={methods}")]).unwrap();
        c
    }

    #[test]
    fn row_count_naive() {
        let report = run_config(&small("naive"), RunOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 7);
        assert!(report.rows.iter().all(|r| r.method == Method::Naive && r.error.is_none()));
        assert_eq!(report.rows.iter().map(|r| r.t).collect::<Vec<_>>(), (4..=10).collect::<Vec<_>>());
    }

    #[test]
    fn baseline_against_itself() {
        let report = run_config(&small("baseline"), RunOptions::default()).unwrap();
        assert!(report.rows.iter().all(|r| r.l1_vs_baseline == Some(0.0)));
    }

    #[test]
    fn row_layout_and_ranges() {
        let mut c = small("baseline,naive,swsbp1,swsbp2");
        c.trials = 2;
        let report = run_config(&c, RunOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 2 * 7 * 4);
        let keys: Vec<_> = report.rows.iter().map(|r| (r.trial, r.t, r.method)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for r in &report.rows {
            for v in [r.l1_vs_baseline.unwrap(), r.l1_vs_truth.unwrap()] {
                assert!((0.0..=2.0).contains(&v));
            }
        }
    }

    #[test]
    fn trial_seeds_differ() {
        let a = trial_seeds(5, 0);
        let b = trial_seeds(5, 1);
        assert_ne!(a.model, b.model);
        assert_eq!(a, trial_seeds(5, 0));
    }

    #[test]
    fn setup_failures_become_rows() {
        let mut c = small("naive");
        c.apply_overrides(&["scenario=bird-migration", "grid_size=3", "sensors=0,7"]).unwrap();
        let report = run_config(&c, RunOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 7);
        assert!(report.rows.iter().all(|r| r.error.is_some() && r.l1_vs_truth.is_none()));
    }

    #[test]
    fn oracle_check_small() {
        let mut c = small("baseline");
        c.apply_overrides(&["d=2", "T=6", "K=2", "M=50"]).unwrap();
        let report = run_config(&c, RunOptions { oracle_check: true, ..Default::default() }).unwrap();
        assert_eq!(report.metadata.oracle_checks, Some(4));
        let mut c = small("baseline");
        c.d = 8;
        assert!(run_config(&c, RunOptions { oracle_check: true, ..Default::default() }).is_err());
    }
}
