//! Query-selection invariants on the four-colour map.

use riskirl::active::{action_entropies, ActiveConfig, Learner, QueryMode, Strategy};
use riskirl::gridworld::{build_gridworld, GridSpec};
use riskirl::irl::{ChainConfig, DemonstrationSet, PosteriorSamples};
use riskirl::mdp::DEFAULT_TOL;
use riskirl::risk::{per_state_var, LossKind};

const WEST: usize = 3;

fn chain(seed: u64) -> ChainConfig {
    ChainConfig {
        num_samples: 300,
        burn_in: 200,
        rng_seed: seed,
        ..ChainConfig::default()
    }
}

#[test]
fn doubling_rewards_keeps_entropy_and_doubles_var() {
    let world = build_gridworld(&GridSpec::four_colour()).unwrap();
    let cells = world.cell_features.clone().unwrap();
    let green = cells.iter().position(|&f| f == 2).unwrap();
    let (row, col) = world.coords(green);
    let demos = DemonstrationSet::from_positives(vec![(world.state(row, col + 1), WEST)]);
    let config = ActiveConfig {
        chain: chain(4),
        ..ActiveConfig::default()
    };
    let learner = Learner::new(&world.mdp, &world.features, &config);
    let state = learner.initialize(demos, 0.0).unwrap();

    let last = world.width() - 1;
    let right: Vec<usize> = (0..world.height()).map(|r| world.state(r, last)).collect();
    let posterior = &state.posterior;
    let doubled = PosteriorSamples::from_weights(
        &world.mdp,
        &world.features,
        posterior.weights() * 2.0,
        posterior.log_posteriors().to_vec(),
        DEFAULT_TOL,
    )
    .unwrap();

    let h1 = action_entropies(posterior, &right, 4).unwrap();
    let h2 = action_entropies(&doubled, &right, 4).unwrap();
    assert_eq!(h1, h2);

    let var = |p: &PosteriorSamples| {
        per_state_var(&world.mdp, p, &world.features, &state.eval_policy, 0.95, 0.05, &right, LossKind::Evd, DEFAULT_TOL).unwrap()
    };
    let (v1, v2) = (var(posterior), var(&doubled));
    for s in &right {
        let (a, b) = (v1.per_candidate[s], v2.per_candidate[s]);
        assert!((b - 2.0 * a).abs() <= 1e-6 * (1.0 + a.abs()), "state {s}: {a} vs {b}");
    }
}

#[test]
fn selection_is_argmax_and_leaves_state_untouched() {
    let world = build_gridworld(&GridSpec::four_colour()).unwrap();
    let demos = DemonstrationSet::from_positives(vec![(0, 1)]);
    let config = ActiveConfig {
        chain: chain(8),
        ..ActiveConfig::default()
    };
    let learner = Learner::new(&world.mdp, &world.features, &config);
    let state = learner.initialize(demos, 0.0).unwrap();
    let before = (state.demos.clone(), state.posterior.weights().clone(), state.report.clone(), state.history.len());

    let selection = learner.select(Strategy::Activevar, &state, QueryMode::Action).unwrap();
    let chosen = selection.query.state().unwrap();
    let max = state.report.per_candidate.values().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(state.report.per_candidate[&chosen], max);
    assert_eq!(selection.score, max);

    for strategy in [Strategy::Entropy, Strategy::Random] {
        learner.select(strategy, &state, QueryMode::Action).unwrap();
        learner.select(strategy, &state, QueryMode::Critique).unwrap();
    }
    assert_eq!(before, (state.demos.clone(), state.posterior.weights().clone(), state.report.clone(), state.history.len()));
}
