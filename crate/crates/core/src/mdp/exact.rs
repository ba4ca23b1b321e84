//! Policy iteration with dense LU policy evaluation for small MDPs.
//!
//! Posterior sampling re-solves the same MDP for thousands of nearby rewards.
//! Nearby rewards usually share an optimal policy, so the solver keeps the
//! factorizations of `I − γP_π` for the last few policies: re-solving then
//! costs one triangular solve plus an optimality check. Deterministic MDPs
//! skip factorization altogether: a deterministic policy there is a
//! functional graph, evaluated exactly in linear time.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, Dyn, LU};
use ndarray::Array1;

use super::{check_rewards, check_tol, TabularMdp};
use crate::error::{Error, Result};

/// Largest state count for which dense factorization is used.
pub const EXACT_STATE_LIMIT: usize = 400;

const CACHE_SIZE: usize = 4;
const MAX_POLICY_ITERATIONS: usize = 1_000;

struct Factor {
    actions: Vec<usize>,
    lu: LU<f64, Dyn, Dyn>,
}

/// Reusable solver; one instance per MDP.
#[derive(Default)]
pub struct PolicyIterationSolver {
    cache: Mutex<Vec<Arc<Factor>>>,
}

impl std::fmt::Debug for PolicyIterationSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyIterationSolver").finish_non_exhaustive()
    }
}

impl PolicyIterationSolver {
    pub fn new() -> Self {
        Self::default()
    }

    fn factor(&self, mdp: &TabularMdp, actions: &[usize]) -> Result<Arc<Factor>> {
        {
            let mut cache = self.cache.lock().expect("solver cache poisoned");
            if let Some(i) = cache.iter().position(|f| f.actions == actions) {
                let hit = cache.remove(i);
                cache.push(Arc::clone(&hit));
                return Ok(hit);
            }
        }
        let n = mdp.num_states;
        let gamma = mdp.discount;
        let mut a = DMatrix::<f64>::identity(n, n);
        for (s, &act) in actions.iter().enumerate() {
            for (t, p) in mdp.successors(s, act) {
                a[(s, t)] -= gamma * p;
            }
        }
        let factor = Arc::new(Factor {
            actions: actions.to_vec(),
            lu: a.lu(),
        });
        let mut cache = self.cache.lock().expect("solver cache poisoned");
        if cache.len() == CACHE_SIZE {
            cache.remove(0);
        }
        cache.push(Arc::clone(&factor));
        Ok(factor)
    }

    /// Optimal values for raw rewards, starting policy iteration from
    /// `init_policy` (or the all-zeros policy). Stops once the Bellman
    /// residual certifies `‖V − V*‖∞ ≤ tol`.
    pub fn optimal_values(
        &self,
        mdp: &TabularMdp,
        rewards: &[f64],
        tol: f64,
        init_policy: Option<&[usize]>,
    ) -> Result<Array1<f64>> {
        check_rewards(mdp, rewards)?;
        check_tol(tol)?;
        let n = mdp.num_states;
        let mut actions = match init_policy {
            Some(p) if p.len() == n && p.iter().all(|&a| a < mdp.num_actions) => p.to_vec(),
            Some(_) => return Err(Error::invalid("initial policy has the wrong shape")),
            None => vec![0; n],
        };
        let gamma = mdp.discount;
        let certify = tol * (1.0 - gamma);
        let rhs = DVector::from_column_slice(rewards);
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_POLICY_ITERATIONS {
            let solved;
            let v: &[f64] = if mdp.deterministic {
                solved = evaluate_functional(mdp, &actions, rewards);
                &solved
            } else {
                let factor = self.factor(mdp, &actions)?;
                let x = factor
                    .lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::InternalConsistency("singular policy evaluation system".into()))?;
                solved = x.as_slice().to_vec();
                &solved
            };
            let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            let noise = 1e-12 * scale;
            residual = 0.0;
            let mut changed = false;
            for s in 0..n {
                let mut best = actions[s];
                let mut best_q = rewards[s] + gamma * mdp.expected_next(s, best, v);
                for a in 0..mdp.num_actions {
                    let q = rewards[s] + gamma * mdp.expected_next(s, a, v);
                    if q > best_q + noise {
                        best = a;
                        best_q = q;
                    }
                }
                residual = residual.max(best_q - v[s]);
                if best != actions[s] {
                    actions[s] = best;
                    changed = true;
                }
            }
            if residual <= certify || !changed {
                return Ok(Array1::from(solved));
            }
        }
        Err(Error::NonConvergence {
            iterations: MAX_POLICY_ITERATIONS,
            residual,
        })
    }
}

/// Values of a deterministic policy in a deterministic MDP. Following the
/// policy from any state ends in a cycle; cycle values come from the closed
/// form `Σ γⁱ rᵢ / (1 − γᴸ)` and every other state is one backup away from
/// its successor.
fn evaluate_functional(mdp: &TabularMdp, actions: &[usize], rewards: &[f64]) -> Vec<f64> {
    const NEW: u8 = 0;
    const ON_PATH: u8 = 1;
    const DONE: u8 = 2;
    let n = mdp.num_states;
    let gamma = mdp.discount;
    let next: Vec<usize> = (0..n)
        .map(|s| mdp.succ_states[mdp.succ_offsets[s * mdp.num_actions + actions[s]]])
        .collect();
    let mut v = vec![0.0; n];
    let mut mark = vec![NEW; n];
    let mut path = Vec::new();
    for root in 0..n {
        if mark[root] != NEW {
            continue;
        }
        let mut s = root;
        while mark[s] == NEW {
            mark[s] = ON_PATH;
            path.push(s);
            s = next[s];
        }
        let mut tail_len = path.len();
        if mark[s] == ON_PATH {
            let start = path.iter().position(|&p| p == s).expect("cycle entry on path");
            let cycle = &path[start..];
            let mut acc = 0.0;
            let mut disc = 1.0;
            for &c in cycle {
                acc += disc * rewards[c];
                disc *= gamma;
            }
            v[cycle[0]] = acc / (1.0 - disc);
            for i in (1..cycle.len()).rev() {
                let c = cycle[i];
                let succ = if i + 1 < cycle.len() { cycle[i + 1] } else { cycle[0] };
                v[c] = rewards[c] + gamma * v[succ];
            }
            for &c in cycle {
                mark[c] = DONE;
            }
            tail_len = start;
        }
        for &p in path[..tail_len].iter().rev() {
            v[p] = rewards[p] + gamma * v[next[p]];
            mark[p] = DONE;
        }
        path.clear();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{optimal_values, random_mdp, DEFAULT_TOL};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn agrees_with_value_iteration(seed in any::<u64>(), n in 1usize..30, a in 1usize..5, branching in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(n, a, branching.min(n), 0.9, &mut rng).unwrap();
            let rewards: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
            let solver = PolicyIterationSolver::new();
            let exact = solver.optimal_values(&mdp, &rewards, DEFAULT_TOL, None).unwrap();
            let vi = optimal_values(&mdp, &rewards, DEFAULT_TOL, None).unwrap();
            for s in 0..n {
                prop_assert!((exact[s] - vi[s]).abs() <= 2.0 * DEFAULT_TOL);
            }
            // A second solve hits the cached factorization and agrees bit for bit.
            let again = solver.optimal_values(&mdp, &rewards, DEFAULT_TOL, None).unwrap();
            prop_assert_eq!(exact, again);
        }
    }

    #[test]
    fn functional_evaluation_matches_iterative() {
        use crate::gridworld::{build_gridworld, GridSpec};
        use crate::mdp::{policy_values, Policy};
        use rand::Rng;
        let g = build_gridworld(&GridSpec { width: 6, height: 5, num_features: 3, ..GridSpec::default() }).unwrap();
        assert!(g.mdp.is_deterministic());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let actions: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
            let rewards: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exact = evaluate_functional(&g.mdp, &actions, &rewards);
            let pol = Policy::from_actions(&actions, 4).unwrap();
            let it = policy_values(&g.mdp, &rewards, &pol, 1e-11).unwrap();
            for s in 0..30 {
                assert!((exact[s] - it[s]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_initial_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = random_mdp(4, 2, 2, 0.9, &mut rng).unwrap();
        let solver = PolicyIterationSolver::new();
        assert!(solver.optimal_values(&mdp, &[0.0; 4], DEFAULT_TOL, Some(&[0, 1])).is_err());
        assert!(solver.optimal_values(&mdp, &[0.0; 4], DEFAULT_TOL, Some(&[0, 1, 2, 0])).is_err());
    }
}
