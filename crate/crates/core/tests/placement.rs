//! Placement model checks against brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riskirl::irl::ChainConfig;
use riskirl::placement::{
    best_placement, distance, optimal_placement, placement_chain, placement_errors, placement_log_likelihood,
    rbf_gradient, rbf_reward, true_optima, Bounds, PlacementDemo, Point, RbfReward, TableConfig,
};

fn random_model<R: Rng>(rng: &mut R) -> RbfReward {
    let k = rng.random_range(1..8);
    RbfReward::new(
        (0..k).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect(),
        (0..k).map(|_| rng.random_range(0.01..0.2)).collect(),
        (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Best lattice point of `side × side`, edges included.
fn grid_search(model: &RbfReward, side: usize) -> (Point, f64) {
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
    for i in 0..side {
        for j in 0..side {
            let p = [j as f64 / (side - 1) as f64, i as f64 / (side - 1) as f64];
            let r = rbf_reward(p, model);
            if r > best.1 {
                best = (p, r);
            }
        }
    }
    best
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    for _ in 0..1000 {
        let model = random_model(&mut rng);
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let g = rbf_gradient(x, &model);
        let fd = [
            (rbf_reward([x[0] + h, x[1]], &model) - rbf_reward([x[0] - h, x[1]], &model)) / (2.0 * h),
            (rbf_reward([x[0], x[1] + h], &model) - rbf_reward([x[0], x[1] - h], &model)) / (2.0 * h),
        ];
        let err = distance(g, fd);
        let scale = (g[0].hypot(g[1])).max(1.0);
        assert!(err / scale < 1e-5, "gradient {g:?} vs finite differences {fd:?} at {x:?}");
    }
}

#[test]
fn best_placement_is_never_beaten_by_a_fine_lattice() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let found = best_placement(&model, &Bounds::unit(), 20, &mut rng).unwrap();
        let (_, lattice_best) = grid_search(&model, 100);
        assert!(found.reward >= lattice_best - 1e-6, "{} < {lattice_best}", found.reward);
    }
}

#[test]
fn two_separated_rbfs_pick_the_heavier_one() {
    let model = RbfReward::new(vec![[0.2, 0.3], [0.8, 0.7]], vec![0.01, 0.01], vec![0.7, 0.3]).unwrap();
    let found = best_placement(&model, &Bounds::unit(), 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (oracle, _) = grid_search(&model, 1001);
    assert!(distance(found.point, oracle) <= 1e-3, "{:?} vs {oracle:?}", found.point);
    assert!(distance(found.point, [0.2, 0.3]) <= 1e-3);
}

#[test]
fn likelihood_normalizer_matches_fine_quadrature() {
    // Two-RBF table: one item plus the anchor grid with all but one anchor
    // weight zero, so c·R spans at most 10.
    let config = TableConfig::new(vec![[0.3, 0.6]], Bounds::unit()).unwrap();
    let mut weights = vec![0.0; config.num_weights()];
    weights[0] = -0.4;
    weights[1 + 4] = 0.6;
    let model = config.reward(&weights).unwrap();
    let placement = [0.5, 0.5];
    let demo = PlacementDemo::new(config, placement).unwrap();
    for c in [1.0, 5.0, 10.0] {
        let coarse = placement_log_likelihood(std::slice::from_ref(&demo), &weights, c).unwrap();
        // The coarse likelihood is a softmax over 2500 points, i.e. the
        // continuous density times the cell area on a unit table.
        let coarse_z = (c * rbf_reward(placement, &model) - coarse - (2500f64).ln()).exp();
        let side = 500;
        let cell = 1.0 / side as f64;
        let mut fine_z = 0.0;
        for i in 0..side {
            for j in 0..side {
                let p = [(j as f64 + 0.5) * cell, (i as f64 + 0.5) * cell];
                fine_z += (c * rbf_reward(p, &model)).exp() * cell * cell;
            }
        }
        assert!((coarse_z / fine_z - 1.0).abs() < 0.01, "c = {c}: {coarse_z} vs {fine_z}");
    }
}

#[test]
fn centre_preference_is_recovered_from_five_demos() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let num_items = 4;
    let mut truth = vec![0.0; num_items + 9];
    truth[num_items + 4] = 1.0;
    let demos: Vec<PlacementDemo> = (0..5)
        .map(|_| {
            let config = TableConfig::random(num_items, Bounds::unit(), &mut rng);
            let at = optimal_placement(&config, &truth).unwrap().point;
            PlacementDemo::new(config, at).unwrap()
        })
        .collect();
    let chain = ChainConfig {
        num_samples: 200,
        burn_in: 500,
        thin: 5,
        rng_seed: 9,
        ..ChainConfig::default()
    };
    let (_, map) = placement_chain(&demos, 50.0, &chain, None).unwrap();
    for _ in 0..20 {
        let config = TableConfig::random(num_items, Bounds::unit(), &mut rng);
        let at = optimal_placement(&config, &map).unwrap().point;
        assert!(distance(at, [0.5, 0.5]) <= 0.05, "MAP placement {at:?}");
    }
}

#[test]
fn hand_built_errors_match_grid_search() {
    // Truth: go to the single item. Learned: go to the table centre.
    let configs = vec![
        TableConfig::new(vec![[0.2, 0.2]], Bounds::unit()).unwrap(),
        TableConfig::new(vec![[0.9, 0.5]], Bounds::unit()).unwrap(),
    ];
    let mut truth = vec![0.0; 10];
    truth[0] = 1.0;
    let mut learned = vec![0.0; 10];
    learned[1 + 4] = 1.0;
    let optima = true_optima(&truth, &configs).unwrap();
    let errors = placement_errors(&learned, &optima, &configs).unwrap();
    let expected: Vec<f64> = configs
        .iter()
        .map(|c| {
            let (t, _) = grid_search(&c.reward(&truth).unwrap(), 1001);
            let (l, _) = grid_search(&c.reward(&learned).unwrap(), 1001);
            distance(t, l)
        })
        .collect();
    for (got, want) in errors.per_config.iter().zip(&expected) {
        assert!((got - want).abs() < 2e-3, "{got} vs {want}");
    }
    assert!((errors.per_config[0] - 0.3 * 2f64.sqrt()).abs() < 1e-6);
    assert!((errors.per_config[1] - 0.4).abs() < 1e-6);
    assert!((errors.mean - (expected[0] + expected[1]) / 2.0).abs() < 2e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn errors_are_non_negative_and_max_bounds_mean(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs: Vec<TableConfig> = (0..5).map(|_| TableConfig::random(3, Bounds::unit(), &mut rng)).collect();
        let truth: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let learned: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let optima = true_optima(&truth, &configs).unwrap();
        let e = placement_errors(&learned, &optima, &configs).unwrap();
        prop_assert!(e.per_config.iter().all(|&d| d >= 0.0));
        prop_assert!(e.max >= e.mean);
    }
}
