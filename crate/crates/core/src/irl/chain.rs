//! Metropolis-Hastings over weight vectors on the unit L1 sphere.
//!
//! The proposal picks one coordinate uniformly, moves it by `±step_size` and
//! re-normalizes. The move is symmetric, so no Hastings correction is applied.
//! The sampler is generic over the scored [`Target`] so that both tabular IRL
//! and the placement task share it.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{l1_normalize, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub num_samples: usize,
    pub burn_in: usize,
    /// Half-width of the single-coordinate proposal step.
    pub step_size: f64,
    /// Demonstrator rationality `c`.
    pub confidence_c: f64,
    pub rng_seed: u64,
    pub thin: usize,
    /// Tolerance for the per-proposal MDP solve.
    pub solver_tol: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            burn_in: 500,
            step_size: 0.05,
            confidence_c: 100.0,
            rng_seed: 0,
            thin: 1,
            solver_tol: DEFAULT_TOL,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be at least 1"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if !(self.confidence_c >= 0.0 && self.confidence_c.is_finite()) {
            return Err(Error::invalid("confidence_c must be a finite non-negative number"));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::invalid("solver_tol must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.burn_in + self.num_samples * self.thin
    }
}

/// Log-posterior of one hypothesis together with whatever the target wants
/// to keep alongside it (e.g. the solved Q-function).
#[derive(Debug, Clone)]
pub struct Scored<C> {
    pub log_posterior: f64,
    pub cache: C,
    /// Likelihood terms that had to be clamped to stay finite.
    pub clamped: usize,
}

pub trait Target {
    type Cache;

    fn dim(&self) -> usize;

    /// Scores an L1-normalized weight vector. `current` is the chain's state
    /// at the time of the proposal and may be used as a warm start.
    fn score(&self, weights: &[f64], current: Option<&Self::Cache>) -> Result<Scored<Self::Cache>>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub proposals: usize,
    pub accepted: usize,
    pub solver_failures: usize,
    pub clamped_negatives: usize,
}

impl ChainStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn merge(&mut self, other: &ChainStats) {
        self.proposals += other.proposals;
        self.accepted += other.accepted;
        self.solver_failures += other.solver_failures;
        self.clamped_negatives += other.clamped_negatives;
    }
}

/// Recorded post-burn-in states. Repeated states share one cache entry.
#[derive(Debug)]
pub struct Chain<C> {
    pub weights: Array2<f64>,
    pub log_posteriors: Vec<f64>,
    pub caches: Vec<Arc<C>>,
    pub stats: ChainStats,
    /// Highest-scoring state visited at any step, thinned or not.
    pub best_weights: Vec<f64>,
    pub best_log_posterior: f64,
}

/// Uniform draw from the unit L1 sphere in `dim` dimensions.
pub fn random_l1_point<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut w: Vec<f64> = (0..dim)
            .map(|_| {
                let magnitude = -(1.0 - rng.random::<f64>()).ln();
                if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect();
        if l1_normalize(&mut w) {
            return w;
        }
    }
}

/// Runs one chain. With `start = None` the chain starts from a uniform point
/// on the L1 sphere drawn from the chain's own RNG stream.
pub fn sample_chain<T: Target>(
    target: &T,
    config: &ChainConfig,
    start: Option<&[f64]>,
) -> Result<Chain<T::Cache>> {
    config.validate()?;
    let dim = target.dim();
    if dim == 0 {
        return Err(Error::invalid("weight dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut weights = match start {
        Some(w) if w.len() == dim => w.to_vec(),
        Some(w) => {
            return Err(Error::invalid(format!(
                "start vector has dimension {}, expected {dim}",
                w.len()
            )))
        }
        None => random_l1_point(dim, &mut rng),
    };
    if !l1_normalize(&mut weights) {
        return Err(Error::invalid("start vector cannot be normalized"));
    }

    let first = target.score(&weights, None)?;
    let mut stats = ChainStats {
        clamped_negatives: first.clamped,
        ..ChainStats::default()
    };
    let mut log_post = first.log_posterior;
    let mut cache = Arc::new(first.cache);
    let mut best_weights = weights.clone();
    let mut best_log_posterior = log_post;

    let mut out_weights = Vec::with_capacity(config.num_samples * dim);
    let mut out_lp = Vec::with_capacity(config.num_samples);
    let mut out_cache = Vec::with_capacity(config.num_samples);
    let mut proposal = vec![0.0; dim];

    for step in 0..config.total_steps() {
        let coord = rng.random_range(0..dim);
        let delta = if rng.random_bool(0.5) {
            config.step_size
        } else {
            -config.step_size
        };
        let u: f64 = rng.random();
        stats.proposals += 1;

        proposal.copy_from_slice(&weights);
        proposal[coord] += delta;
        if l1_normalize(&mut proposal) {
            match target.score(&proposal, Some(&cache)) {
                Ok(scored) => {
                    stats.clamped_negatives += scored.clamped;
                    let ratio = scored.log_posterior - log_post;
                    if ratio >= 0.0 || u.ln() < ratio {
                        std::mem::swap(&mut weights, &mut proposal);
                        log_post = scored.log_posterior;
                        cache = Arc::new(scored.cache);
                        stats.accepted += 1;
                        if log_post > best_log_posterior {
                            best_log_posterior = log_post;
                            best_weights.copy_from_slice(&weights);
                        }
                    }
                }
                Err(Error::NonConvergence { .. }) => stats.solver_failures += 1,
                Err(e) => return Err(e),
            }
        }

        if step >= config.burn_in && (step - config.burn_in + 1) % config.thin == 0 {
            out_weights.extend_from_slice(&weights);
            out_lp.push(log_post);
            out_cache.push(Arc::clone(&cache));
        }
    }

    let n = out_lp.len();
    Ok(Chain {
        weights: Array2::from_shape_vec((n, dim), out_weights).expect("row-major"),
        log_posteriors: out_lp,
        caches: out_cache,
        stats,
        best_weights,
        best_log_posterior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-density `-κ‖w − target‖²` on the sphere.
    struct Quadratic {
        center: Vec<f64>,
        kappa: f64,
    }

    impl Target for Quadratic {
        type Cache = ();

        fn dim(&self) -> usize {
            self.center.len()
        }

        fn score(&self, w: &[f64], _: Option<&()>) -> Result<Scored<()>> {
            let d: f64 = w.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
            Ok(Scored {
                log_posterior: -self.kappa * d,
                cache: (),
                clamped: 0,
            })
        }
    }

    #[test]
    fn flat_target_accepts_everything() {
        let target = Quadratic {
            center: vec![0.0; 3],
            kappa: 0.0,
        };
        let cfg = ChainConfig {
            num_samples: 500,
            burn_in: 10,
            ..ChainConfig::default()
        };
        let chain = sample_chain(&target, &cfg, None).unwrap();
        assert_eq!(chain.stats.acceptance_rate(), 1.0);
        assert_eq!(chain.weights.nrows(), 500);
    }

    #[test]
    fn thinning_and_burn_in_produce_requested_count() {
        let target = Quadratic {
            center: vec![1.0, 0.0],
            kappa: 5.0,
        };
        let cfg = ChainConfig {
            num_samples: 37,
            burn_in: 13,
            thin: 4,
            ..ChainConfig::default()
        };
        let chain = sample_chain(&target, &cfg, None).unwrap();
        assert_eq!(chain.weights.nrows(), 37);
        assert_eq!(chain.stats.proposals, 13 + 37 * 4);
        for row in chain.weights.rows() {
            let l1: f64 = row.iter().map(|x| x.abs()).sum();
            assert!((l1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrates_near_the_mode() {
        let target = Quadratic {
            center: vec![0.0, 1.0, 0.0],
            kappa: 200.0,
        };
        let cfg = ChainConfig {
            num_samples: 2000,
            burn_in: 500,
            step_size: 0.05,
            rng_seed: 9,
            ..ChainConfig::default()
        };
        let chain = sample_chain(&target, &cfg, None).unwrap();
        let mean_w1 = chain.weights.column(1).mean().unwrap();
        assert!(mean_w1 > 0.9, "mean weight {mean_w1}");
    }

    #[test]
    fn rejects_bad_configs() {
        let target = Quadratic {
            center: vec![0.0],
            kappa: 1.0,
        };
        let bad = ChainConfig {
            num_samples: 0,
            ..ChainConfig::default()
        };
        assert!(sample_chain(&target, &bad, None).is_err());
        let bad = ChainConfig {
            thin: 0,
            ..ChainConfig::default()
        };
        assert!(sample_chain(&target, &bad, None).is_err());
        assert!(sample_chain(&target, &ChainConfig::default(), Some(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn random_l1_point_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in 1..20 {
            let w = random_l1_point(dim, &mut rng);
            let l1: f64 = w.iter().map(|x| x.abs()).sum();
            assert!((l1 - 1.0).abs() < 1e-12);
        }
    }
}
