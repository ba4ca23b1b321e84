//! Bayesian IRL: softmax demonstration likelihood, policy-walk posterior
//! sampling over linear reward weights, and MAP / mean reward extraction.

pub mod chain;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    argmax_lowest, l1_normalize, q_from_raw, solve_optimal, LinearReward, PolicyIterationSolver, QFunction,
    TabularMdp, ValueFunction, DEFAULT_TOL, EXACT_STATE_LIMIT,
};

pub use chain::{random_l1_point, sample_chain, Chain, ChainConfig, ChainStats, Scored, Target};

/// Probabilities at or above `1 − NEGATIVE_CLAMP` make a negative pair's
/// complement term clamp to `ln(NEGATIVE_CLAMP)`.
pub const NEGATIVE_CLAMP: f64 = 1e-12;

/// Labeled `(state, action)` pairs. Positives come from demonstrations and
/// "good" critique segments, negatives from "bad" critique segments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub positives: Vec<(usize, usize)>,
    #[serde(default)]
    pub negatives: Vec<(usize, usize)>,
}

impl DemonstrationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_positives(positives: Vec<(usize, usize)>) -> Self {
        Self {
            positives,
            negatives: Vec::new(),
        }
    }

    pub fn push_positive(&mut self, state: usize, action: usize) {
        self.positives.push((state, action));
    }

    pub fn push_negative(&mut self, state: usize, action: usize) {
        self.negatives.push((state, action));
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    pub fn validate(&self, num_states: usize, num_actions: usize) -> Result<()> {
        for &(s, a) in self.positives.iter().chain(&self.negatives) {
            if s >= num_states || a >= num_actions {
                return Err(Error::invalid(format!(
                    "demonstration pair ({s}, {a}) out of range for |S|={num_states}, |A|={num_actions}"
                )));
            }
        }
        Ok(())
    }
}

/// Log-likelihood value plus the number of clamped negative terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub value: f64,
    pub clamped: usize,
}

/// Softmax log-likelihood of `demos` given a solved `Q*`.
///
/// Positive pairs contribute `log softmax(c·Q*(s,·))[a]`; negative pairs
/// contribute `log(1 − softmax(c·Q*(s,·))[a])`, computed from the other
/// actions' mass so it stays accurate when the probability is close to one.
pub fn likelihood_from_q(q: &QFunction, demos: &DemonstrationSet, c: f64) -> Likelihood {
    let mut value = 0.0;
    let mut clamped = 0;
    let values = q.values();
    for &(s, a) in &demos.positives {
        let row = values.row(s);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(c * x));
        let sum: f64 = row.iter().map(|&x| (c * x - m).exp()).sum();
        value += c * row[a] - m - sum.ln();
    }
    for &(s, a) in &demos.negatives {
        let row = values.row(s);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(c * x));
        let mut total = 0.0;
        let mut others = 0.0;
        for (b, &x) in row.iter().enumerate() {
            let e = (c * x - m).exp();
            total += e;
            if b != a {
                others += e;
            }
        }
        let p = (c * row[a] - m).exp() / total;
        if p >= 1.0 - NEGATIVE_CLAMP || others <= 0.0 {
            value += NEGATIVE_CLAMP.ln();
            clamped += 1;
        } else {
            value += (others / total).ln();
        }
    }
    Likelihood { value, clamped }
}

/// Log-likelihood of `demos` under `reward` with rationality `c`.
pub fn demo_log_likelihood(
    mdp: &TabularMdp,
    reward: &LinearReward,
    demos: &DemonstrationSet,
    c: f64,
) -> Result<f64> {
    demos.validate(mdp.num_states(), mdp.num_actions())?;
    if demos.is_empty() {
        return Ok(0.0);
    }
    let r = reward.state_rewards();
    let (_, q) = solve_optimal(mdp, r.as_slice().expect("contiguous"), DEFAULT_TOL, None)?;
    let lik = likelihood_from_q(&q, demos, c);
    if lik.clamped > 0 {
        log::warn!("{} negative demonstration terms clamped", lik.clamped);
    }
    Ok(lik.value)
}

/// Extension point for non-uniform reward priors.
pub trait RewardPrior: Sync {
    fn log_prior(&self, weights: &[f64]) -> f64;
}

/// Uniform prior over the L1 sphere; contributes a constant.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPrior;

impl RewardPrior for UniformPrior {
    fn log_prior(&self, _: &[f64]) -> f64 {
        0.0
    }
}

/// Optimal values and Q-function of one reward hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub values: ValueFunction,
    pub q: QFunction,
}

impl OptimalSolution {
    pub fn solve(mdp: &TabularMdp, rewards: &[f64], tol: f64, warm: Option<&[f64]>) -> Result<Self> {
        let (values, q) = solve_optimal(mdp, rewards, tol, warm)?;
        Ok(Self { values, q })
    }

    /// Solves with policy iteration, starting from the greedy policy of `warm`.
    pub fn solve_exact(
        mdp: &TabularMdp,
        rewards: &[f64],
        tol: f64,
        warm: Option<&OptimalSolution>,
        solver: &PolicyIterationSolver,
    ) -> Result<Self> {
        let init = warm.map(|w| (0..w.q.num_states()).map(|s| w.q.argmax(s)).collect::<Vec<_>>());
        let v = solver.optimal_values(mdp, rewards, tol, init.as_deref())?;
        let q = q_from_raw(mdp, rewards, v.as_slice().expect("contiguous"));
        Ok(Self {
            values: ValueFunction::new(v),
            q: QFunction::new(q),
        })
    }
}

/// Posterior target for tabular IRL: every proposal is solved for `Q*`.
pub struct PolicyWalkTarget<'a> {
    pub mdp: &'a TabularMdp,
    pub features: &'a Array2<f64>,
    pub demos: &'a DemonstrationSet,
    pub confidence_c: f64,
    pub solver_tol: f64,
    pub prior: &'a dyn RewardPrior,
    /// Used instead of value iteration when present.
    pub exact: Option<PolicyIterationSolver>,
}

impl Target for PolicyWalkTarget<'_> {
    type Cache = OptimalSolution;

    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn score(&self, weights: &[f64], current: Option<&OptimalSolution>) -> Result<Scored<OptimalSolution>> {
        let w = ArrayView1::from(weights);
        let rewards = self.features.dot(&w);
        let rewards = rewards.as_slice().expect("contiguous");
        let solution = match &self.exact {
            Some(solver) => OptimalSolution::solve_exact(self.mdp, rewards, self.solver_tol, current, solver)?,
            None => {
                let warm = current.map(|c| c.values.values().as_slice().expect("contiguous"));
                OptimalSolution::solve(self.mdp, rewards, self.solver_tol, warm)?
            }
        };
        let lik = likelihood_from_q(&solution.q, self.demos, self.confidence_c);
        Ok(Scored {
            log_posterior: lik.value + self.prior.log_prior(weights),
            cache: solution,
            clamped: lik.clamped,
        })
    }
}

/// Ordered reward-weight samples with their log-posteriors and, for tabular
/// problems, the optimal solution of each sample.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    weights: Array2<f64>,
    log_posteriors: Vec<f64>,
    solutions: Option<Vec<Arc<OptimalSolution>>>,
    map_index: usize,
    stats: ChainStats,
}

impl PosteriorSamples {
    pub fn new(
        weights: Array2<f64>,
        log_posteriors: Vec<f64>,
        solutions: Option<Vec<Arc<OptimalSolution>>>,
    ) -> Result<Self> {
        if weights.nrows() != log_posteriors.len() {
            return Err(Error::invalid(format!(
                "{} weight rows but {} log-posteriors",
                weights.nrows(),
                log_posteriors.len()
            )));
        }
        if let Some(sol) = &solutions {
            if sol.len() != log_posteriors.len() {
                return Err(Error::invalid("one cached solution per sample is required"));
            }
        }
        let map_index = argmax_lowest(log_posteriors.iter().copied());
        Ok(Self {
            weights,
            log_posteriors,
            solutions,
            map_index,
            stats: ChainStats::default(),
        })
    }

    /// Builds a posterior from explicit weights and solves each sample.
    pub fn from_weights(
        mdp: &TabularMdp,
        features: &Array2<f64>,
        weights: Array2<f64>,
        log_posteriors: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        let solutions = weights
            .rows()
            .into_iter()
            .map(|w| {
                let r = features.dot(&w);
                OptimalSolution::solve(mdp, r.as_slice().expect("contiguous"), tol, None).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, log_posteriors, Some(solutions))
    }

    fn from_chain(chain: Chain<OptimalSolution>) -> Result<Self> {
        let mut out = Self::new(chain.weights, chain.log_posteriors, Some(chain.caches))?;
        out.stats = chain.stats;
        Ok(out)
    }

    pub(crate) fn with_stats(mut self, stats: ChainStats) -> Self {
        self.stats = stats;
        self
    }

    /// Concatenates independent chains.
    pub fn pool(parts: Vec<PosteriorSamples>) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("posterior pool"))?;
        let dim = first.dim();
        let keep_solutions = parts.iter().all(|p| p.solutions.is_some());
        let mut rows = Vec::new();
        let mut lps = Vec::new();
        let mut sols = Vec::new();
        let mut stats = ChainStats::default();
        for p in parts {
            if p.dim() != dim {
                return Err(Error::invalid("cannot pool posteriors of different dimension"));
            }
            rows.extend(p.weights.iter().copied());
            lps.extend(p.log_posteriors);
            stats.merge(&p.stats);
            if keep_solutions {
                sols.extend(p.solutions.expect("checked"));
            }
        }
        let n = lps.len();
        let weights = Array2::from_shape_vec((n, dim), rows).expect("row-major");
        Ok(Self::new(weights, lps, keep_solutions.then_some(sols))?.with_stats(stats))
    }

    pub fn len(&self) -> usize {
        self.log_posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_posteriors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.weights.row(i)
    }

    pub fn log_posteriors(&self) -> &[f64] {
        &self.log_posteriors
    }

    pub fn solutions(&self) -> Option<&[Arc<OptimalSolution>]> {
        self.solutions.as_deref()
    }

    pub fn stats(&self) -> &ChainStats {
        &self.stats
    }

    /// Index of the maximum log-posterior (earliest on ties).
    pub fn map_index(&self) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::Empty("posterior sample set"));
        }
        Ok(self.map_index)
    }

    pub fn map_weights(&self) -> Result<Array1<f64>> {
        Ok(self.weights.row(self.map_index()?).to_owned())
    }

    /// Coordinate-wise mean, re-normalized to unit L1 norm.
    pub fn mean_weights(&self) -> Result<Array1<f64>> {
        if self.is_empty() {
            return Err(Error::Empty("posterior sample set"));
        }
        let mut mean = self.weights.mean_axis(ndarray::Axis(0)).expect("non-empty");
        if !l1_normalize(mean.as_slice_mut().expect("contiguous")) {
            return Err(Error::invalid("posterior mean weight vector is zero"));
        }
        Ok(mean)
    }

    /// Solves any sample that lacks a cached solution.
    pub fn ensure_solutions(&mut self, mdp: &TabularMdp, features: &Array2<f64>, tol: f64) -> Result<()> {
        if self.solutions.is_some() {
            return Ok(());
        }
        let solved = Self::from_weights(mdp, features, self.weights.clone(), self.log_posteriors.clone(), tol)?;
        self.solutions = solved.solutions;
        Ok(())
    }

    pub fn to_dump(&self) -> PosteriorDump {
        PosteriorDump {
            weights: self.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            log_posteriors: self.log_posteriors.clone(),
            map_index: self.map_index,
        }
    }

    /// Restores a dump; cached solutions are not part of the dump.
    pub fn from_dump(dump: PosteriorDump) -> Result<Self> {
        let n = dump.weights.len();
        let d = dump.weights.first().map_or(0, Vec::len);
        if dump.weights.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged weight rows"));
        }
        let weights = Array2::from_shape_vec((n, d), dump.weights.into_iter().flatten().collect())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let out = Self::new(weights, dump.log_posteriors, None)?;
        if n > 0 && out.map_index != dump.map_index {
            return Err(Error::invalid("map_index does not point at the maximum log-posterior"));
        }
        Ok(out)
    }
}

/// Flat JSON form of a posterior: `weights[i][k]`, `log_posteriors[i]`, `map_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDump {
    pub weights: Vec<Vec<f64>>,
    pub log_posteriors: Vec<f64>,
    pub map_index: usize,
}

/// Policy-walk MCMC from a random start.
pub fn policy_walk_mcmc(
    mdp: &TabularMdp,
    features: &Array2<f64>,
    demos: &DemonstrationSet,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    policy_walk_mcmc_from(mdp, features, demos, config, None)
}

/// Policy-walk MCMC, optionally warm-started from `start`.
pub fn policy_walk_mcmc_from(
    mdp: &TabularMdp,
    features: &Array2<f64>,
    demos: &DemonstrationSet,
    config: &ChainConfig,
    start: Option<&[f64]>,
) -> Result<PosteriorSamples> {
    if features.nrows() != mdp.num_states() {
        return Err(Error::invalid(format!(
            "feature matrix has {} rows, MDP has {} states",
            features.nrows(),
            mdp.num_states()
        )));
    }
    demos.validate(mdp.num_states(), mdp.num_actions())?;
    let target = PolicyWalkTarget {
        mdp,
        features,
        demos,
        confidence_c: config.confidence_c,
        solver_tol: config.solver_tol,
        prior: &UniformPrior,
        exact: (mdp.num_states() <= EXACT_STATE_LIMIT).then(PolicyIterationSolver::new),
    };
    let chain = sample_chain(&target, config, start)?;
    if chain.stats.clamped_negatives > 0 {
        log::warn!(
            "{} negative demonstration terms clamped during sampling",
            chain.stats.clamped_negatives
        );
    }
    PosteriorSamples::from_chain(chain)
}

/// Reward of the maximum-a-posteriori sample.
pub fn map_reward(samples: &PosteriorSamples, features: &Arc<Array2<f64>>) -> Result<LinearReward> {
    LinearReward::new(samples.map_weights()?, Arc::clone(features))
}

/// Mean reward over the samples, re-normalized.
pub fn mean_reward(samples: &PosteriorSamples, features: &Arc<Array2<f64>>) -> Result<LinearReward> {
    LinearReward::new(samples.mean_weights()?, Arc::clone(features))
}
