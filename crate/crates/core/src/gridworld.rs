//! Gridworld MDPs, benchmark layouts and synthetic demonstrators.
//!
//! States are numbered row-major from the top-left cell: `s = row * width +
//! col`. Actions are `N, S, E, W` (ids 0..4). Moving into the border leaves
//! the agent in place; with slip probability `p` the intended move happens
//! with probability `1 − p` and each other move with `p / 3`.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::{Segment, SegmentLabel, Trajectory};
use crate::error::{Error, Result};
use crate::mdp::{
    l1_normalize, solve_optimal, uniform_over, LinearReward, Policy, QFunction, TabularMdp, DEFAULT_TOL,
};

pub const NUM_ACTIONS: usize = 4;
pub const ACTION_NAMES: [&str; NUM_ACTIONS] = ["N", "S", "E", "W"];
const DELTAS: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, 1), (0, -1)];

/// Q-values within this of the row maximum count as optimal for critiques.
pub const CRITIQUE_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Each feature value uniform in `[0, 1]`.
    RandomContinuous,
    /// Each cell carries one randomly chosen indicator feature.
    SparseIndicator,
    /// Four-colour map for the query-comparison example.
    #[serde(alias = "fig1_layout")]
    FourColourLayout,
    /// Sparse barrier map with a single rewarding cell.
    BarrierLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub num_features: usize,
    pub feature_mode: FeatureMode,
    /// Start states; empty means every state.
    #[serde(default)]
    pub initial_states: Vec<usize>,
    #[serde(default)]
    pub slip: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_discount() -> f64 {
    0.95
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            num_features: 48,
            feature_mode: FeatureMode::RandomContinuous,
            initial_states: Vec::new(),
            slip: 0.0,
            discount: default_discount(),
            rng_seed: 0,
        }
    }
}

/// A hard-coded indicator map: one character per cell, one feature per
/// distinct character in `palette` order.
struct Layout {
    rows: &'static [&'static str],
    palette: &'static str,
    /// Cells drawn with these characters are initial states.
    initial: &'static str,
    /// Ground-truth weight per palette entry (L1 norm 1).
    weights: &'static [f64],
}

// w = white, y = yellow, g = green, b = blue.
const FOUR_COLOUR: Layout = Layout {
    rows: &["wwwwywbw", "wwgwywbw", "wwwwwwbw", "wwwwwwbw", "wwwwwwbw"],
    palette: "wygb",
    initial: "w",
    weights: &[-0.05, -0.35, 0.4, -0.2],
};

// . = plain floor, p = pink goal, r/o/v = negative obstacle colours.
const BARRIER: Layout = Layout {
    rows: &[
        "........", //
        "........",
        "........",
        "rrrrrr.r",
        "........",
        "..o..v..",
        "....p...",
        "........",
    ],
    palette: ".prov",
    initial: ".",
    weights: &[-0.05, 0.45, -0.3, -0.1, -0.1],
};

impl Layout {
    fn width(&self) -> usize {
        self.rows[0].len()
    }

    fn height(&self) -> usize {
        self.rows.len()
    }

    fn cells(&self) -> Vec<usize> {
        self.rows
            .iter()
            .flat_map(|r| r.chars())
            .map(|c| self.palette.find(c).expect("layout character in palette"))
            .collect()
    }

    fn initial_states(&self) -> Vec<usize> {
        self.rows
            .iter()
            .flat_map(|r| r.chars())
            .enumerate()
            .filter(|(_, c)| self.initial.contains(*c))
            .map(|(s, _)| s)
            .collect()
    }
}

fn layout_for(mode: FeatureMode) -> Option<&'static Layout> {
    match mode {
        FeatureMode::FourColourLayout => Some(&FOUR_COLOUR),
        FeatureMode::BarrierLayout => Some(&BARRIER),
        _ => None,
    }
}

impl GridSpec {
    /// The four-colour comparison map with its default initial states.
    pub fn four_colour() -> Self {
        Self::for_layout(FeatureMode::FourColourLayout, &FOUR_COLOUR)
    }

    /// The sparse barrier map; every state is an initial state.
    pub fn barrier() -> Self {
        let mut spec = Self::for_layout(FeatureMode::BarrierLayout, &BARRIER);
        spec.initial_states.clear();
        spec
    }

    fn for_layout(mode: FeatureMode, layout: &Layout) -> Self {
        Self {
            width: layout.width(),
            height: layout.height(),
            num_features: layout.palette.len(),
            feature_mode: mode,
            initial_states: layout.initial_states(),
            ..Self::default()
        }
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid width and height must be positive"));
        }
        if self.num_features == 0 {
            return Err(Error::invalid("num_features must be positive"));
        }
        if !(0.0..1.0).contains(&self.slip) {
            return Err(Error::invalid(format!("slip {} must lie in [0, 1)", self.slip)));
        }
        if let Some(&s) = self.initial_states.iter().find(|&&s| s >= self.num_states()) {
            return Err(Error::invalid(format!("initial state {s} outside the grid")));
        }
        if let Some(layout) = layout_for(self.feature_mode) {
            if (self.width, self.height, self.num_features) != (layout.width(), layout.height(), layout.palette.len()) {
                return Err(Error::invalid(format!(
                    "{:?} requires a {}x{} grid with {} features",
                    self.feature_mode,
                    layout.width(),
                    layout.height(),
                    layout.palette.len()
                )));
            }
        }
        Ok(())
    }
}

/// A built gridworld: dynamics, features and, for indicator maps, the
/// feature index of every cell.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub spec: GridSpec,
    pub mdp: TabularMdp,
    pub features: Arc<Array2<f64>>,
    pub cell_features: Option<Vec<usize>>,
}

impl Gridworld {
    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn coords(&self, state: usize) -> (usize, usize) {
        (state / self.spec.width, state % self.spec.width)
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.spec.width + col
    }

    /// States sharing an edge with `state`.
    pub fn neighbors(&self, state: usize) -> Vec<usize> {
        let (r, c) = self.coords(state);
        DELTAS
            .iter()
            .filter_map(|&(dr, dc)| move_to(r, c, dr, dc, self.spec.width, self.spec.height))
            .filter(|&n| n != state)
            .collect()
    }

    /// Ground-truth weights of a hard-coded layout.
    pub fn layout_weights(&self) -> Option<Array1<f64>> {
        layout_for(self.spec.feature_mode).map(|l| Array1::from(l.weights.to_vec()))
    }

    /// One character per cell: the palette letter for indicator layouts,
    /// the feature index modulo 36 for sparse maps and `.` otherwise. `marks`
    /// overrides individual cells.
    pub fn render(&self, marks: &[(usize, char)]) -> String {
        let palette = layout_for(self.spec.feature_mode).map(|l| l.palette);
        let mut out = String::new();
        for r in 0..self.spec.height {
            for c in 0..self.spec.width {
                let s = self.state(r, c);
                let ch = if let Some(&(_, m)) = marks.iter().find(|(ms, _)| *ms == s) {
                    m
                } else {
                    match (&self.cell_features, palette) {
                        (Some(cells), Some(p)) => p.chars().nth(cells[s]).unwrap_or('?'),
                        (Some(cells), None) => std::char::from_digit((cells[s] % 36) as u32, 36).unwrap_or('?'),
                        _ => '.',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    /// Renders a deterministic policy as arrows.
    pub fn render_policy(&self, policy: &Policy) -> String {
        let marks: Vec<(usize, char)> = (0..self.mdp.num_states())
            .map(|s| (s, ['^', 'v', '>', '<'][policy.action(s)]))
            .collect();
        self.render(&marks)
    }
}

fn move_to(r: usize, c: usize, dr: isize, dc: isize, width: usize, height: usize) -> Option<usize> {
    let nr = r.checked_add_signed(dr)?;
    let nc = c.checked_add_signed(dc)?;
    (nr < height && nc < width).then(|| nr * width + nc)
}

fn grid_transitions(width: usize, height: usize, slip: f64) -> Array3<f64> {
    let n = width * height;
    let mut t = Array3::zeros((n, NUM_ACTIONS, n));
    for s in 0..n {
        let (r, c) = (s / width, s % width);
        for a in 0..NUM_ACTIONS {
            for (b, &(dr, dc)) in DELTAS.iter().enumerate() {
                let p = if a == b { 1.0 - slip } else { slip / 3.0 };
                if p == 0.0 {
                    continue;
                }
                let next = move_to(r, c, dr, dc, width, height).unwrap_or(s);
                t[[s, a, next]] += p;
            }
        }
    }
    // Corner cells pool several moves into one entry; keep rounding below 1.
    t.mapv_inplace(|p: f64| p.min(1.0));
    t
}

pub fn build_gridworld(spec: &GridSpec) -> Result<Gridworld> {
    spec.validate()?;
    let n = spec.num_states();
    let k = spec.num_features;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (features, cell_features) = match spec.feature_mode {
        FeatureMode::RandomContinuous => (Array2::from_shape_fn((n, k), |_| rng.random::<f64>()), None),
        FeatureMode::SparseIndicator => {
            let cells: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            (indicator_matrix(&cells, k), Some(cells))
        }
        FeatureMode::FourColourLayout | FeatureMode::BarrierLayout => {
            let cells = layout_for(spec.feature_mode).expect("layout mode").cells();
            (indicator_matrix(&cells, k), Some(cells))
        }
    };
    let initial: Vec<usize> = if spec.initial_states.is_empty() {
        (0..n).collect()
    } else {
        spec.initial_states.clone()
    };
    let start = uniform_over(n, &initial)?;
    let mdp = TabularMdp::new(grid_transitions(spec.width, spec.height, spec.slip), spec.discount, start, 1.0)?;
    Ok(Gridworld {
        spec: spec.clone(),
        mdp,
        features: Arc::new(features),
        cell_features,
    })
}

fn indicator_matrix(cells: &[usize], k: usize) -> Array2<f64> {
    let mut phi = Array2::zeros((cells.len(), k));
    for (s, &f) in cells.iter().enumerate() {
        phi[[s, f]] = 1.0;
    }
    phi
}

/// Ground-truth weights: each coordinate uniform in `[-1, 1]`, then L1-normalized.
pub fn random_true_weights<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        if l1_normalize(&mut w) {
            return Array1::from(w);
        }
    }
}

/// Synthetic demonstrator with a known reward.
#[derive(Debug, Clone)]
pub struct Oracle {
    reward: LinearReward,
    /// Rationality `c`; `f64::INFINITY` answers greedily.
    rationality: f64,
    q: QFunction,
    rng: ChaCha8Rng,
}

impl Oracle {
    pub fn new(mdp: &TabularMdp, reward: LinearReward, rationality: f64, seed: u64) -> Result<Self> {
        if rationality.is_nan() || rationality < 0.0 {
            return Err(Error::invalid("rationality must be non-negative"));
        }
        let r = reward.state_rewards();
        let (_, q) = solve_optimal(mdp, r.as_slice().expect("contiguous"), DEFAULT_TOL, None)?;
        Ok(Self {
            reward,
            rationality,
            q,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn reward(&self) -> &LinearReward {
        &self.reward
    }

    pub fn q(&self) -> &QFunction {
        &self.q
    }

    pub fn rationality(&self) -> f64 {
        self.rationality
    }

    /// Draws an action from `softmax(c · Q*(state, ·))`.
    pub fn action(&mut self, state: usize) -> usize {
        if self.rationality.is_infinite() {
            return self.q.argmax(state);
        }
        let row = self.q.values().row(state);
        let max = self.q.state_max(state);
        let weights: Vec<f64> = row.iter().map(|&v| (self.rationality * (v - max)).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        for (a, w) in weights.iter().enumerate() {
            if u < *w {
                return a;
            }
            u -= w;
        }
        weights.len() - 1
    }

    pub fn is_optimal(&self, state: usize, action: usize) -> bool {
        self.q.get(state, action) >= self.q.state_max(state) - CRITIQUE_TIE_TOL
    }

    /// Labels each pair by optimality under the true reward and merges runs
    /// of equal labels into maximal segments.
    pub fn critique(&self, trajectory: &[(usize, usize)]) -> Result<Vec<Segment>> {
        if trajectory.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &(s, a)) in trajectory.iter().enumerate() {
            let label = if self.is_optimal(s, a) {
                SegmentLabel::Good
            } else {
                SegmentLabel::Bad
            };
            match segments.last_mut() {
                Some(seg) if seg.label == label => seg.end = i,
                _ => segments.push(Segment { start: i, end: i, label }),
            }
        }
        Ok(segments)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Take each policy's most probable action and most likely successor.
    #[default]
    MostLikely,
    /// Sample actions and successors from the seeded RNG.
    Sampled,
}

fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = (usize, f64)>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Follows `policy` for `length` steps from `start`.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    length: usize,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<Trajectory> {
    mdp.check_state(start)?;
    if policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions() {
        return Err(Error::invalid("policy shape does not match the MDP"));
    }
    let mut out = Vec::with_capacity(length);
    let mut s = start;
    for _ in 0..length {
        let a = match mode {
            RolloutMode::MostLikely => policy.action(s),
            RolloutMode::Sampled => {
                sample_index(policy.action_probs().row(s).iter().copied().enumerate(), rng)
            }
        };
        out.push((s, a));
        s = match mode {
            RolloutMode::MostLikely => mdp.most_likely_next(s, a),
            RolloutMode::Sampled => sample_index(mdp.successors(s, a), rng),
        };
    }
    Ok(out)
}

/// States from which `target` can be reached under some action sequence.
pub fn reaches(mdp: &TabularMdp, target: usize) -> Vec<bool> {
    let n = mdp.num_states();
    let mut ok = vec![false; n];
    ok[target] = true;
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if ok[s] {
                continue;
            }
            if (0..mdp.num_actions()).any(|a| mdp.successors(s, a).any(|(t, _)| ok[t])) {
                ok[s] = true;
                changed = true;
            }
        }
    }
    ok
}

/// Two states with one indicator feature each. Action 0 stays put and
/// action 1 switches state, so either state can be reached from the other.
pub fn toy_chain(discount: f64) -> Result<(TabularMdp, Arc<Array2<f64>>)> {
    let mut t = Array3::zeros((2, 2, 2));
    t[[0, 0, 0]] = 1.0;
    t[[0, 1, 1]] = 1.0;
    t[[1, 0, 1]] = 1.0;
    t[[1, 1, 0]] = 1.0;
    let mdp = TabularMdp::new(t, discount, Array1::from_elem(2, 0.5), 1.0)?;
    Ok((mdp, Arc::new(Array2::eye(2))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::greedy_policy;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_cell_self_loops() {
        let g = build_gridworld(&GridSpec {
            width: 1,
            height: 1,
            num_features: 1,
            ..GridSpec::default()
        })
        .unwrap();
        for a in 0..4 {
            assert_eq!(g.mdp.transition()[[0, a, 0]], 1.0);
        }
    }

    #[test]
    fn moves_and_walls() {
        let g = build_gridworld(&GridSpec {
            width: 3,
            height: 2,
            num_features: 2,
            ..GridSpec::default()
        })
        .unwrap();
        // State 1 is the top-middle cell.
        assert_eq!(g.mdp.most_likely_next(1, 0), 1);
        assert_eq!(g.mdp.most_likely_next(1, 1), 4);
        assert_eq!(g.mdp.most_likely_next(1, 2), 2);
        assert_eq!(g.mdp.most_likely_next(1, 3), 0);
        assert_eq!(g.mdp.most_likely_next(2, 2), 2);
    }

    #[test]
    fn slip_spreads_over_other_moves() {
        let g = build_gridworld(&GridSpec {
            width: 3,
            height: 3,
            num_features: 1,
            slip: 0.3,
            ..GridSpec::default()
        })
        .unwrap();
        let t = g.mdp.transition();
        // Centre cell 4, action N.
        assert!((t[[4, 0, 1]] - 0.7).abs() < 1e-12);
        for next in [7, 5, 3] {
            assert!((t[[4, 0, next]] - 0.1).abs() < 1e-12);
        }
        // Corner 0, action N: N and W bump into walls.
        assert!((t[[0, 0, 0]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn seeded_features_are_reproducible() {
        let spec = GridSpec {
            rng_seed: 17,
            ..GridSpec::default()
        };
        let a = build_gridworld(&spec).unwrap();
        let b = build_gridworld(&spec).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.features.dim(), (64, 48));
        assert!(a.features.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn layouts_check_dimensions() {
        let mut spec = GridSpec::four_colour();
        build_gridworld(&spec).unwrap();
        spec.num_features = 5;
        assert!(build_gridworld(&spec).is_err());
        let mut spec = GridSpec::barrier();
        spec.width += 1;
        assert!(build_gridworld(&spec).is_err());
    }

    #[test]
    fn layout_weights_are_l1_normalized() {
        for spec in [GridSpec::four_colour(), GridSpec::barrier()] {
            let g = build_gridworld(&spec).unwrap();
            let w = g.layout_weights().unwrap();
            assert!((w.iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn barrier_goal_is_the_only_positive_feature_and_reachable() {
        let g = build_gridworld(&GridSpec::barrier()).unwrap();
        let w = g.layout_weights().unwrap();
        let positive: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        assert_eq!(positive.len(), 1);
        let cells = g.cell_features.as_ref().unwrap();
        let goals: Vec<usize> = (0..cells.len()).filter(|&s| cells[s] == positive[0]).collect();
        assert_eq!(goals.len(), 1);
        let ok = reaches(&g.mdp, goals[0]);
        let starts: Vec<usize> = (0..g.mdp.num_states()).filter(|&s| g.mdp.start_dist()[s] > 0.0).collect();
        assert!(!starts.is_empty());
        assert!(starts.iter().all(|&s| ok[s]));
    }

    #[test]
    fn legacy_layout_name_still_parses() {
        let m: FeatureMode = serde_json::from_str("\"fig1_layout\"").unwrap();
        assert_eq!(m, FeatureMode::FourColourLayout);
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"four_colour_layout\"");
    }

    #[test]
    fn four_colour_initial_states_are_white() {
        let g = build_gridworld(&GridSpec::four_colour()).unwrap();
        let cells = g.cell_features.as_ref().unwrap();
        for s in 0..g.mdp.num_states() {
            assert_eq!(g.mdp.start_dist()[s] > 0.0, cells[s] == 0);
        }
        assert!(g.render(&[]).starts_with("wwwwywbw\n"));
    }

    #[test]
    fn four_colour_rightmost_column_is_walled_off_by_blue() {
        let g = build_gridworld(&GridSpec::four_colour()).unwrap();
        let cells = g.cell_features.as_ref().unwrap();
        let right: Vec<usize> = (0..g.height()).map(|r| g.state(r, g.width() - 1)).collect();
        // Flood fill from the right column without entering blue.
        let mut seen = right.clone();
        let mut stack = right.clone();
        while let Some(s) = stack.pop() {
            for n in g.neighbors(s) {
                if cells[n] != 3 && !seen.contains(&n) {
                    seen.push(n);
                    stack.push(n);
                }
            }
        }
        seen.sort_unstable();
        let mut right_sorted = right;
        right_sorted.sort_unstable();
        assert_eq!(seen, right_sorted);
    }

    fn fixed_world() -> (Gridworld, LinearReward) {
        let g = build_gridworld(&GridSpec::four_colour()).unwrap();
        let r = LinearReward::new(g.layout_weights().unwrap(), g.features.clone()).unwrap();
        (g, r)
    }

    #[test]
    fn greedy_oracle_picks_optimal_action() {
        let (g, r) = fixed_world();
        let mut o = Oracle::new(&g.mdp, r, f64::INFINITY, 0).unwrap();
        for s in 0..g.mdp.num_states() {
            let a = o.action(s);
            assert_eq!(a, o.q().argmax(s));
            assert!(o.is_optimal(s, a));
        }
    }

    #[test]
    fn greedy_oracle_breaks_ties_low() {
        let g = build_gridworld(&GridSpec {
            width: 2,
            height: 2,
            num_features: 1,
            feature_mode: FeatureMode::SparseIndicator,
            ..GridSpec::default()
        })
        .unwrap();
        let r = LinearReward::new(ndarray::array![1.0], g.features.clone()).unwrap();
        let mut o = Oracle::new(&g.mdp, r, f64::INFINITY, 0).unwrap();
        assert_eq!(o.action(3), 0);
    }

    #[test]
    fn zero_rationality_is_uniform() {
        let (g, r) = fixed_world();
        let mut o = Oracle::new(&g.mdp, r, 0.0, 5).unwrap();
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[o.action(0)] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9% quantile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn critique_segments() {
        let (g, r) = fixed_world();
        let o = Oracle::new(&g.mdp, r, f64::INFINITY, 0).unwrap();
        let opt = greedy_policy(o.q());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let good = rollout(&g.mdp, &opt, 0, 8, RolloutMode::MostLikely, &mut rng).unwrap();
        let segs = o.critique(&good).unwrap();
        assert_eq!(segs, vec![Segment { start: 0, end: 7, label: SegmentLabel::Good }]);

        let worst: Vec<(usize, usize)> = (0..6)
            .map(|s| {
                let row = o.q().values().row(s).to_owned();
                let a = (0..4).filter(|&a| !o.is_optimal(s, a)).min_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
                (s, a)
            })
            .collect();
        let segs = o.critique(&worst).unwrap();
        assert_eq!(segs, vec![Segment { start: 0, end: 5, label: SegmentLabel::Bad }]);

        let alternating: Vec<(usize, usize)> = (0..4)
            .map(|i| if i % 2 == 0 { good[i] } else { worst[i] })
            .collect();
        let segs = o.critique(&alternating).unwrap();
        assert_eq!(segs.len(), 4);
        for (i, seg) in segs.iter().enumerate() {
            assert_eq!((seg.start, seg.end), (i, i));
            let (s, a) = alternating[i];
            let expect = if o.q().get(s, a) >= o.q().state_max(s) - CRITIQUE_TIE_TOL {
                SegmentLabel::Good
            } else {
                SegmentLabel::Bad
            };
            assert_eq!(seg.label, expect);
        }
        assert!(o.critique(&[]).is_err());
    }

    /// Straight-line simulator over the grid, independent of the tensor.
    fn simulate(width: usize, height: usize, actions: &[usize], start: usize, len: usize) -> Vec<(usize, usize)> {
        let mut s = start;
        let mut out = Vec::new();
        for _ in 0..len {
            let a = actions[s];
            out.push((s, a));
            let (r, c) = ((s / width) as isize, (s % width) as isize);
            let (nr, nc) = match a {
                0 => (r - 1, c),
                1 => (r + 1, c),
                2 => (r, c + 1),
                _ => (r, c - 1),
            };
            if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
                s = nr as usize * width + nc as usize;
            }
        }
        out
    }

    #[test]
    fn rollout_matches_simulator() {
        let g = build_gridworld(&GridSpec {
            width: 5,
            height: 4,
            num_features: 1,
            ..GridSpec::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let actions: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let pol = Policy::from_actions(&actions, 4).unwrap();
            let start = trial % 20;
            let mine = rollout(&g.mdp, &pol, start, 12, RolloutMode::Sampled, &mut rng).unwrap();
            assert_eq!(mine, simulate(5, 4, &actions, start, 12));
            let ml = rollout(&g.mdp, &pol, start, 12, RolloutMode::MostLikely, &mut rng).unwrap();
            assert_eq!(mine, ml);
        }
        assert!(rollout(&g.mdp, &Policy::uniform(20, 4), 0, 0, RolloutMode::Sampled, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn sampled_rollout_is_seeded() {
        let g = build_gridworld(&GridSpec {
            slip: 0.2,
            rng_seed: 4,
            ..GridSpec::default()
        })
        .unwrap();
        let pol = Policy::uniform(64, 4);
        let a = rollout(&g.mdp, &pol, 9, 30, RolloutMode::Sampled, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = rollout(&g.mdp, &pol, 9, 30, RolloutMode::Sampled, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn true_weights_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 1..50 {
            let w = random_true_weights(k, &mut rng);
            assert!((w.iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|x| x.abs() <= 1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn generated_worlds_are_valid_mdps(
            width in 1usize..7,
            height in 1usize..7,
            k in 1usize..6,
            sparse in any::<bool>(),
            slip in 0.0f64..0.9,
            seed in any::<u64>(),
        ) {
            let spec = GridSpec {
                width,
                height,
                num_features: k,
                feature_mode: if sparse { FeatureMode::SparseIndicator } else { FeatureMode::RandomContinuous },
                slip,
                rng_seed: seed,
                ..GridSpec::default()
            };
            let g = build_gridworld(&spec).unwrap();
            let t = g.mdp.transition();
            for s in 0..spec.num_states() {
                for a in 0..4 {
                    let row: f64 = (0..spec.num_states()).map(|n| t[[s, a, n]]).sum();
                    prop_assert!((row - 1.0).abs() < 1e-9);
                }
            }
            prop_assert_eq!(g.features.dim(), (width * height, k));
        }
    }
}
