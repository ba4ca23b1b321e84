//! Dynamic-programming solvers against closed forms and Monte-Carlo rollouts.

use std::sync::Arc;

use ndarray::{array, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riskirl::mdp::{
    evaluate_policy, greedy_policy, q_from_values, random_mdp, value_iteration, LinearReward, Policy, TabularMdp,
};

const TOL: f64 = 1e-10;

fn sample_index<R: Rng>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if u < p {
            return i;
        }
        u -= p;
        last = i;
    }
    last
}

/// Mean and standard error of the discounted return from `start`.
fn monte_carlo(mdp: &TabularMdp, rewards: &Array1<f64>, policy: &Policy, start: usize, runs: usize, horizon: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = mdp.transition();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..runs {
        let (mut s, mut g, mut discount) = (start, 0.0, 1.0);
        for _ in 0..horizon {
            g += discount * rewards[s];
            discount *= mdp.discount();
            let a = sample_index(policy.action_probs().row(s).iter().copied(), &mut rng);
            s = sample_index((0..mdp.num_states()).map(|n| t[[s, a, n]]), &mut rng);
        }
        sum += g;
        sum_sq += g * g;
    }
    let mean = sum / runs as f64;
    let var = (sum_sq / runs as f64 - mean * mean).max(0.0);
    (mean, (var / runs as f64).sqrt())
}

#[test]
fn single_state_and_two_state_closed_forms() {
    let mut t = Array3::zeros((1, 1, 1));
    t[[0, 0, 0]] = 1.0;
    let mdp = TabularMdp::new(t, 0.9, array![1.0], 1.0).unwrap();
    let r = LinearReward::new(array![1.0], Arc::new(Array2::ones((1, 1)))).unwrap();
    let v = value_iteration(&mdp, &r, 1e-12).unwrap();
    assert!((v.get(0) - 1.0 / (1.0 - 0.9)).abs() < 1e-8);

    let mut t = Array3::zeros((2, 1, 2));
    t[[0, 0, 1]] = 1.0;
    t[[1, 0, 1]] = 1.0;
    let mdp = TabularMdp::new(t, 0.5, array![1.0, 0.0], 1.0).unwrap();
    let r = LinearReward::new(array![0.0, 1.0], Arc::new(Array2::eye(2))).unwrap();
    let v = value_iteration(&mdp, &r, 1e-12).unwrap();
    // V(1) = 1 / (1 - γ) = 2, V(0) = γ V(1) = 1.
    assert!((v.get(0) - 1.0).abs() < 1e-8);
    assert!((v.get(1) - 2.0).abs() < 1e-8);
}

#[test]
fn policy_evaluation_matches_rollouts_on_random_mdps() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(4, 3, 3, 0.9, &mut rng).unwrap();
        let weights = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let reward = LinearReward::normalized(weights, Arc::new(Array2::eye(4))).unwrap();
        let rewards = reward.state_rewards();

        let v_star = value_iteration(&mdp, &reward, TOL).unwrap();
        let greedy = greedy_policy(&q_from_values(&mdp, &reward, &v_star).unwrap());
        let mut probs = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() + 0.1);
        for mut row in probs.rows_mut() {
            let total = row.sum();
            row /= total;
        }
        let stochastic = Policy::new(probs).unwrap();

        for policy in [&greedy, &stochastic] {
            let exact = evaluate_policy(&mdp, &reward, policy, TOL).unwrap();
            // Horizon cut-off error, for deterministic rows where the standard error is 0.
            let truncation = mdp.discount().powi(200) / (1.0 - mdp.discount());
            for s in 0..4 {
                let (mean, se) = monte_carlo(&mdp, &rewards, policy, s, 100_000, 200, seed * 10 + s as u64);
                assert!(
                    (mean - exact.get(s)).abs() <= 3.0 * se + truncation,
                    "seed {seed} state {s}: rollout {mean} ± {se}, exact {}",
                    exact.get(s)
                );
            }
        }
    }
}
