//! VaR versus entropy query choice on the four-colour map.
//!
//! Both strategies start from one demonstration (a step into the green cell)
//! and ask two action queries. The map's right column is walled off by blue
//! cells, so no policy can avoid blue from there.

use serde::{Deserialize, Serialize};

use riskirl::active::{ActiveConfig, Demonstrator, Learner, QueryMode, Strategy};
use riskirl::gridworld::{build_gridworld, GridSpec, Gridworld, Oracle};
use riskirl::irl::{ChainConfig, DemonstrationSet};
use riskirl::mdp::LinearReward;

use crate::error::{HarnessError, Result};

const BLUE: usize = 3;
const GREEN: usize = 2;
/// Index of the west move.
const WEST: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourColourQueries {
    pub seed: u64,
    /// Queried `(row, col)` cells in order.
    pub var: Vec<(usize, usize)>,
    pub entropy: Vec<(usize, usize)>,
    /// VaR's second query lies outside the rightmost column.
    pub var_second_off_right_column: bool,
    /// Entropy's second query has a blue 4-neighbour.
    pub entropy_second_next_to_blue: bool,
}

pub fn four_colour_world() -> Result<Gridworld> {
    Ok(build_gridworld(&GridSpec::four_colour())?)
}

/// Runs two queries per strategy on the map with chain seed `seed`.
pub fn four_colour_queries(seed: u64) -> Result<FourColourQueries> {
    let world = four_colour_world()?;
    let cells = world
        .cell_features
        .clone()
        .ok_or_else(|| HarnessError::Config("four-colour map has no cell colours".into()))?;
    let weights = world
        .layout_weights()
        .ok_or_else(|| HarnessError::Config("four-colour map has no ground-truth weights".into()))?;
    let truth = LinearReward::new(weights, world.features.clone())?;
    let oracle = Oracle::new(&world.mdp, truth, 100.0, seed)?;

    let green = cells
        .iter()
        .position(|&f| f == GREEN)
        .ok_or_else(|| HarnessError::Config("four-colour map has no green cell".into()))?;
    let (row, col) = world.coords(green);
    let demos = DemonstrationSet::from_positives(vec![(world.state(row, col + 1), WEST)]);

    let config = ActiveConfig {
        chain: ChainConfig {
            rng_seed: seed,
            ..ChainConfig::default()
        },
        query_seed: seed,
        ..ActiveConfig::default()
    };
    let learner = Learner::new(&world.mdp, &world.features, &config);
    let initial = learner.initialize(demos, 0.0)?;

    let run = |strategy: Strategy| -> Result<Vec<usize>> {
        let mut oracle = oracle.clone();
        let mut state = initial.clone();
        let mut asked = Vec::new();
        for _ in 0..2 {
            let selection = learner.select(strategy, &state, QueryMode::Action)?;
            let answer = oracle.answer(&selection.query)?;
            asked.push(selection.query.state().expect("action query"));
            state = learner.incorporate_answer(&state, &selection.query, &answer)?;
        }
        Ok(asked)
    };
    let var = run(Strategy::Activevar)?;
    let entropy = run(Strategy::Entropy)?;

    let last_col = world.width() - 1;
    Ok(FourColourQueries {
        seed,
        var_second_off_right_column: world.coords(var[1]).1 != last_col,
        entropy_second_next_to_blue: world.neighbors(entropy[1]).iter().any(|&n| cells[n] == BLUE),
        var: var.iter().map(|&s| world.coords(s)).collect(),
        entropy: entropy.iter().map(|&s| world.coords(s)).collect(),
    })
}
