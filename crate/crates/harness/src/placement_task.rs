//! Paired placement trials: VaR-selected versus random query configurations.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riskirl::active::Strategy;
use riskirl::placement::{
    distance, optimal_placement, placement_errors, true_optima, Bounds, PlacementConfig, PlacementDemo,
    PlacementLearner, PlacementState, Point, Scenario, TableConfig,
};

use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};
use crate::experiment::trial_seed;
use crate::metrics::MetricsRecord;

pub fn scenario(task: Task) -> Result<Scenario> {
    match task {
        Task::PlacementVase => Ok(Scenario::Vase),
        Task::PlacementSpoon => Ok(Scenario::Spoon),
        other => Err(HarnessError::Config(format!("{other:?} is not a placement task"))),
    }
}

/// Ground truth, held-out configurations and the initial demonstrations of one trial.
pub struct PlacementTrial {
    pub scenario: Scenario,
    pub truth: Vec<f64>,
    pub tests: Vec<TableConfig>,
    pub test_optima: Vec<Point>,
    pub demos: Vec<PlacementDemo>,
    pub learner_config: PlacementConfig,
}

impl PlacementTrial {
    pub fn new(cfg: &ExperimentConfig, trial: usize) -> Result<Self> {
        let scenario = scenario(cfg.task)?;
        let truth = scenario.true_weights();
        let bounds = Bounds::unit();
        let mut test_rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg, trial, 1));
        let tests: Vec<TableConfig> = (0..cfg.placement.test_configs)
            .map(|_| TableConfig::random(scenario.num_items(), bounds, &mut test_rng))
            .collect();
        let test_optima = true_optima(&truth, &tests)?;
        let mut demo_rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg, trial, 2));
        let demos = (0..cfg.initial_demos.max(1))
            .map(|_| {
                let c = TableConfig::random(scenario.num_items(), bounds, &mut demo_rng);
                let p = optimal_placement(&c, &truth)?.point;
                Ok(PlacementDemo::new(c, p)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut chain = cfg.placement.chain.clone();
        chain.rng_seed = trial_seed(cfg, trial, 3);
        let learner_config = PlacementConfig {
            alpha: cfg.alpha,
            delta: cfg.delta,
            confidence: cfg.placement.confidence,
            chain,
            candidates: cfg.placement.candidates,
            warm_start: cfg.warm_start,
            seed: trial_seed(cfg, trial, 4),
        };
        Ok(Self {
            scenario,
            truth,
            tests,
            test_optima,
            demos,
            learner_config,
        })
    }

    /// The synthetic demonstrator: the true optimum of `config`.
    pub fn demonstrate(&self, config: &TableConfig) -> Result<PlacementDemo> {
        let p = optimal_placement(config, &self.truth)?.point;
        Ok(PlacementDemo::new(config.clone(), p)?)
    }
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<MetricsRecord>> {
    let setup = PlacementTrial::new(cfg, trial)?;
    let learner = PlacementLearner::new(&setup.learner_config);
    let initial = learner.posterior(setup.demos.clone(), None)?;
    let mut records = Vec::new();
    for &strategy in &cfg.strategies {
        records.extend(run_strategy(cfg, &setup, &learner, initial.clone(), strategy, trial)?);
    }
    Ok(records)
}

/// One strategy from a shared initial posterior. Every iteration records the
/// held-out errors and the bound of the query it would ask next.
pub fn run_strategy(
    cfg: &ExperimentConfig,
    setup: &PlacementTrial,
    learner: &PlacementLearner<'_>,
    mut state: PlacementState,
    strategy: Strategy,
    trial: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    let mut queried = None;
    let mut update_time = std::time::Duration::ZERO;
    for iteration in 0..=cfg.queries_per_trial {
        let errors = placement_errors(&state.map_weights, &setup.test_optima, &setup.tests)?;
        let base = &state.demos[0].config;
        let candidates = learner.candidates(base, iteration);
        let t = Instant::now();
        let query = learner.select(&state, &candidates, strategy, iteration)?;
        let select = t.elapsed();
        let demo = setup.demonstrate(&query.config)?;
        let realized = distance(query.var.map_placement, demo.placement);
        records.push(MetricsRecord {
            trial,
            strategy: strategy.name().to_string(),
            iteration,
            policy_loss: errors.mean,
            worst_state_loss: errors.max,
            // Random runs only score the drawn candidate.
            max_var_bound: query.max_bound.unwrap_or(query.var.bound),
            queried,
            mean_placement_error: Some(errors.mean),
            max_placement_error: Some(errors.max),
            query_loss: Some(realized),
            query_bound: Some(query.var.bound),
            select_ms: select.as_secs_f64() * 1e3,
            wall_time_ms: (select + update_time).as_secs_f64() * 1e3,
        });
        if iteration == cfg.queries_per_trial {
            break;
        }
        let t = Instant::now();
        state = learner.incorporate(&state, demo)?;
        update_time = t.elapsed();
        queried = Some(query.index);
    }
    Ok(records)
}
