//! Stopping-rule check on small domains whose ground truth is known.
//!
//! The learner runs ActiveVaR with the normalized EVD loss until the max
//! bound drops below ε; the result is then scored against the true reward.

use std::sync::Arc;

use ndarray::{array, Array2};
use serde::{Deserialize, Serialize};

use riskirl::active::{run_active_loop, ActiveConfig, QueryMode, Strategy};
use riskirl::gridworld::{build_gridworld, toy_chain, FeatureMode, GridSpec, Oracle};
use riskirl::irl::{ChainConfig, DemonstrationSet};
use riskirl::mdp::{optimal_values, policy_values, LinearReward, TabularMdp};
use riskirl::risk::{normalize_loss, LossKind};

use crate::error::Result;

const TRUTH_TOL: f64 = 1e-10;

/// A small world with a known reward.
pub struct ToyDomain {
    pub name: &'static str,
    pub mdp: TabularMdp,
    pub features: Arc<Array2<f64>>,
    pub truth: LinearReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingOutcome {
    pub domain: String,
    pub stopped: bool,
    pub queries: usize,
    pub final_max_var: f64,
    /// Largest true normalized EVD over all states at termination.
    pub worst_true_normalized_evd: f64,
}

/// Two states: stay or switch, with the second state better.
pub fn two_state_chain() -> Result<ToyDomain> {
    let (mdp, features) = toy_chain(0.9)?;
    let truth = LinearReward::new(array![0.3, 0.7], features.clone())?;
    Ok(ToyDomain {
        name: "two_state_chain",
        mdp,
        features,
        truth,
    })
}

/// 3×3 grid: one goal cell, one hazard cell, plain floor elsewhere.
pub fn goal_grid() -> Result<ToyDomain> {
    let spec = GridSpec {
        width: 3,
        height: 3,
        num_features: 3,
        feature_mode: FeatureMode::RandomContinuous,
        discount: 0.9,
        ..GridSpec::default()
    };
    let world = build_gridworld(&spec)?;
    let mut phi = Array2::zeros((9, 3));
    for s in 0..9 {
        let f = match s {
            8 => 1,
            4 => 2,
            _ => 0,
        };
        phi[[s, f]] = 1.0;
    }
    let features = Arc::new(phi);
    let truth = LinearReward::new(array![0.1, 0.7, -0.2], features.clone())?;
    Ok(ToyDomain {
        name: "goal_grid",
        mdp: world.mdp,
        features,
        truth,
    })
}

pub fn toy_domains() -> Result<Vec<ToyDomain>> {
    Ok(vec![two_state_chain()?, goal_grid()?])
}

/// Runs ActiveVaR with the normalized stopping rule at `epsilon` and scores
/// the final MAP policy against the truth.
pub fn check_stopping(domain: &ToyDomain, epsilon: f64, max_queries: usize, seed: u64) -> Result<StoppingOutcome> {
    let config = ActiveConfig {
        chain: ChainConfig {
            num_samples: 1000,
            burn_in: 200,
            // Few weight dimensions: large steps keep the empty-demo chain
            // from sitting in one orthant.
            step_size: 0.3,
            rng_seed: seed,
            ..ChainConfig::default()
        },
        loss: LossKind::NormalizedEvd,
        query_seed: seed,
        ..ActiveConfig::default()
    };
    let mut oracle = Oracle::new(&domain.mdp, domain.truth.clone(), f64::INFINITY, seed)?;
    let run = run_active_loop(
        &domain.mdp,
        &domain.features,
        &config,
        DemonstrationSet::new(),
        Strategy::Activevar,
        QueryMode::Action,
        epsilon,
        max_queries,
        &mut oracle,
    )?;
    if let Some(e) = run.aborted {
        return Err(e.into());
    }
    let state = run.state;
    let r = domain.truth.state_rewards();
    let r = r.as_slice().expect("contiguous");
    let v_star = optimal_values(&domain.mdp, r, TRUTH_TOL, None)?;
    let v = policy_values(&domain.mdp, r, &state.eval_policy, TRUTH_TOL)?;
    let worst = v_star
        .iter()
        .zip(&v)
        .map(|(&opt, &got)| normalize_loss(opt - got, opt, TRUTH_TOL))
        .fold(0.0, f64::max);
    Ok(StoppingOutcome {
        domain: domain.name.to_string(),
        stopped: state.stopped,
        queries: state.iteration(),
        final_max_var: state.max_var(),
        worst_true_normalized_evd: worst,
    })
}
