//! Paired multi-strategy trials.
//!
//! Within a trial every strategy sees the same world, the same ground-truth
//! reward, the same initial demonstrations and an identically seeded oracle,
//! so per-iteration differences come from query choice alone. Losses are
//! measured against the ground truth, which the learner never sees.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use riskirl::active::{derive_seed, ActiveConfig, Learner, LoopState, Strategy};
use riskirl::gridworld::{build_gridworld, random_true_weights, Gridworld, Oracle};
use riskirl::irl::DemonstrationSet;
use riskirl::mdp::{optimal_values, policy_values, LinearReward, Policy, TabularMdp};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{self, MetricsRecord, Summary};

/// Solver tolerance for ground-truth evaluation.
const TRUTH_TOL: f64 = 1e-10;

#[derive(Debug)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub trials_completed: usize,
    /// `(trial, error message)` for trials that failed and were skipped.
    pub failures: Vec<(usize, String)>,
}

impl ExperimentOutput {
    pub fn summary(&self) -> Result<Summary> {
        metrics::summarize(&self.records, self.trials_completed, self.failures.len())
    }

    /// Writes `metrics.csv`, `metrics.jsonl`, `timing.csv` and `summary.json`.
    pub fn write(&self, dir: &std::path::Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = vec![
            dir.join("metrics.csv"),
            dir.join("metrics.jsonl"),
            dir.join("timing.csv"),
            dir.join("summary.json"),
        ];
        metrics::write_metrics_csv(&files[0], &self.records)?;
        metrics::write_jsonl(&files[1], &self.records)?;
        metrics::write_timing_csv(&files[2], &metrics::timing_table(&self.records))?;
        std::fs::write(&files[3], serde_json::to_string_pretty(&self.summary()?)?)?;
        Ok(files)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut completed = 0;
    for trial in 0..cfg.num_trials {
        let result = if cfg.task.is_placement() {
            crate::placement_task::run_trial(cfg, trial)
        } else {
            run_grid_trial(cfg, trial)
        };
        match result {
            Ok(mut r) => {
                completed += 1;
                records.append(&mut r);
            }
            Err(e) => {
                log::error!("trial {trial} failed: {e}");
                failures.push((trial, e.to_string()));
            }
        }
    }
    Ok(ExperimentOutput {
        records,
        trials_completed: completed,
        failures,
    })
}

/// Seed of an independent stream within one trial.
pub fn trial_seed(cfg: &ExperimentConfig, trial: usize, stream: u64) -> u64 {
    derive_seed(derive_seed(cfg.seed, trial as u64), stream)
}

/// World, ground truth and shared starting point of one gridworld trial.
pub struct GridTrial {
    pub world: Gridworld,
    pub truth: LinearReward,
    pub oracle: Oracle,
    pub demos: DemonstrationSet,
    pub active: ActiveConfig,
    pub v_star: Array1<f64>,
}

impl GridTrial {
    pub fn new(cfg: &ExperimentConfig, trial: usize) -> Result<Self> {
        let mut spec = cfg.grid_spec();
        spec.rng_seed = trial_seed(cfg, trial, 1);
        let world = build_gridworld(&spec)?;
        let weights = match world.layout_weights() {
            Some(w) => w,
            None => random_true_weights(spec.num_features, &mut ChaCha8Rng::seed_from_u64(trial_seed(cfg, trial, 2))),
        };
        let truth = LinearReward::new(weights, world.features.clone())?;
        let mut oracle = Oracle::new(&world.mdp, truth.clone(), cfg.oracle_c, trial_seed(cfg, trial, 3))?;
        let starts: Vec<usize> = (0..world.mdp.num_states())
            .filter(|&s| world.mdp.start_dist()[s] > 0.0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg, trial, 4));
        let mut demos = DemonstrationSet::new();
        for _ in 0..cfg.initial_demos {
            let s = starts[rng.random_range(0..starts.len())];
            demos.push_positive(s, oracle.action(s));
        }
        let mut chain = cfg.chain.clone();
        chain.rng_seed = trial_seed(cfg, trial, 5);
        let active = ActiveConfig {
            alpha: cfg.alpha,
            delta: cfg.delta,
            chain,
            critique_len: cfg.critique_len,
            rollout: cfg.rollout,
            loss: cfg.loss,
            warm_start: cfg.warm_start,
            candidates: None,
            query_seed: trial_seed(cfg, trial, 6),
        };
        let r = truth.state_rewards();
        let v_star = optimal_values(&world.mdp, r.as_slice().expect("contiguous"), TRUTH_TOL, None)?;
        Ok(Self {
            world,
            truth,
            oracle,
            demos,
            active,
            v_star,
        })
    }

    pub fn learner(&self) -> Learner<'_> {
        Learner::new(&self.world.mdp, &self.world.features, &self.active)
    }

    /// `(EVD over the start distribution, worst per-state EVD)` under the truth.
    pub fn true_losses(&self, policy: &Policy) -> Result<(f64, f64)> {
        true_losses(&self.world.mdp, &self.truth, &self.v_star, policy)
    }
}

pub fn true_losses(mdp: &TabularMdp, truth: &LinearReward, v_star: &Array1<f64>, policy: &Policy) -> Result<(f64, f64)> {
    let r = truth.state_rewards();
    let v = policy_values(mdp, r.as_slice().expect("contiguous"), policy, TRUTH_TOL)?;
    let gaps = v_star - &v;
    let worst = gaps.iter().fold(0.0f64, |m, &g| m.max(g)).max(0.0);
    Ok((mdp.start_dist().dot(&gaps).max(0.0), worst))
}

fn run_grid_trial(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<MetricsRecord>> {
    let setup = GridTrial::new(cfg, trial)?;
    let learner = setup.learner();
    let initial = learner.initialize(setup.demos.clone(), cfg.epsilon)?;
    let mut records = Vec::new();
    for &strategy in &cfg.strategies {
        records.extend(run_strategy(cfg, &setup, &learner, initial.clone(), strategy, trial)?);
    }
    Ok(records)
}

/// Runs one strategy from a shared initial state and records every iteration.
pub fn run_strategy(
    cfg: &ExperimentConfig,
    setup: &GridTrial,
    learner: &Learner<'_>,
    initial: LoopState,
    strategy: Strategy,
    trial: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut oracle = setup.oracle.clone();
    let mut records = Vec::new();
    let mut failure = None;
    let run = learner.run(
        initial,
        strategy,
        cfg.task.query_mode(),
        cfg.queries_per_trial,
        &mut oracle,
        &mut |state, timing| {
            if failure.is_some() {
                return;
            }
            match setup.true_losses(&state.eval_policy) {
                Ok((loss, worst)) => records.push(MetricsRecord {
                    trial,
                    strategy: strategy.name().to_string(),
                    iteration: state.iteration(),
                    policy_loss: loss,
                    worst_state_loss: worst,
                    max_var_bound: state.max_var(),
                    queried: state.history.last().and_then(|h| h.query.state()),
                    mean_placement_error: None,
                    max_placement_error: None,
                    query_loss: None,
                    query_bound: None,
                    select_ms: timing.select.as_secs_f64() * 1e3,
                    wall_time_ms: (timing.select + timing.update).as_secs_f64() * 1e3,
                }),
                Err(e) => failure = Some(e),
            }
        },
    );
    if let Some(e) = failure.or(run.aborted.map(crate::HarnessError::from)) {
        return Err(e);
    }
    Ok(records)
}

/// Queries each strategy needed before the worst per-state true loss fell
/// below `threshold`; runs that never got there count as `cap + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueriesToThreshold {
    pub strategy: String,
    pub per_trial: Vec<usize>,
    pub censored: usize,
    pub mean: f64,
}

pub fn queries_to_threshold(records: &[MetricsRecord], strategy: &str, threshold: f64, cap: usize) -> QueriesToThreshold {
    let mut by_trial: std::collections::BTreeMap<usize, Option<usize>> = Default::default();
    for r in records.iter().filter(|r| r.strategy == strategy) {
        let e = by_trial.entry(r.trial).or_insert(None);
        if r.worst_state_loss < threshold && e.is_none_or(|i| r.iteration < i) {
            *e = Some(r.iteration);
        }
    }
    let per_trial: Vec<usize> = by_trial.values().map(|v| v.unwrap_or(cap + 1)).collect();
    let censored = by_trial.values().filter(|v| v.is_none()).count();
    let mean = per_trial.iter().sum::<usize>() as f64 / per_trial.len().max(1) as f64;
    QueriesToThreshold {
        strategy: strategy.to_string(),
        per_trial,
        censored,
        mean,
    }
}

/// Time one query selection per strategy from a shared posterior.
pub fn time_selection(setup: &GridTrial, state: &LoopState, strategy: Strategy, repeats: usize) -> Result<f64> {
    let learner = setup.learner();
    let t = Instant::now();
    for _ in 0..repeats.max(1) {
        let sel = learner.select(strategy, state, riskirl::active::QueryMode::Action)?;
        std::hint::black_box(&sel);
    }
    Ok(t.elapsed().as_secs_f64() / repeats.max(1) as f64)
}
