//! Tabletop placement with RBF rewards.
//!
//! A reward hypothesis is a weight vector over radial basis functions
//! centred on every object of a [`TableConfig`] plus a fixed 3×3 lattice of
//! table anchors. Because the reward is linear in the weights, the basis
//! values at any set of points can be computed once per configuration and
//! reused for every posterior sample.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::{derive_seed, Strategy};
use crate::error::{Error, Result};
use crate::irl::chain::{sample_chain, ChainConfig, Scored, Target};
use crate::irl::PosteriorSamples;
use crate::mdp::l1_normalize;
use crate::risk::{var_upper_bound, VarBound};

pub type Point = [f64; 2];

/// Width σ² of object-centred basis functions, in m².
pub const OBJECT_WIDTH: f64 = 0.02;
/// Width σ² of the fixed anchor basis functions, in m².
pub const ANCHOR_WIDTH: f64 = 0.08;
/// Points per side of the likelihood quadrature grid.
pub const QUADRATURE_SIDE: usize = 50;
/// Points per side of the lattice that seeds gradient ascent.
pub const SEED_LATTICE_SIDE: usize = 21;
/// Lattice local maxima refined per hypothesis.
const SEEDS_PER_HYPOTHESIS: usize = 3;

const ASCENT_STEP: f64 = 0.05;
const ASCENT_MAX_STEP: f64 = 16.0 * ASCENT_STEP;
const ASCENT_MIN_IMPROVEMENT: f64 = 1e-10;
const ASCENT_MAX_ITERATIONS: usize = 1000;
const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn unit() -> Self {
        Self {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: Point) -> Point {
        [p[0].clamp(self.min[0], self.max[0]), p[1].clamp(self.min[1], self.max[1])]
    }

    pub fn center(&self) -> Point {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        [
            rng.random_range(self.min[0]..=self.max[0]),
            rng.random_range(self.min[1]..=self.max[1]),
        ]
    }

    /// `side × side` evenly spaced points including the edges, row-major.
    pub fn lattice(&self, side: usize) -> Vec<Point> {
        let step = |i: usize, k: usize| {
            if side == 1 {
                0.5 * (self.max[k] - self.min[k])
            } else {
                i as f64 / (side - 1) as f64 * (self.max[k] - self.min[k])
            }
        };
        let mut out = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                out.push([self.min[0] + step(c, 0), self.min[1] + step(r, 1)]);
            }
        }
        out
    }

    /// Centres of a `side × side` grid of equal cells, row-major; the
    /// midpoint quadrature nodes of the table.
    pub fn cell_centers(&self, side: usize) -> Vec<Point> {
        let at = |i: usize, k: usize| self.min[k] + (i as f64 + 0.5) / side as f64 * (self.max[k] - self.min[k]);
        let mut out = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                out.push([at(c, 0), at(r, 1)]);
            }
        }
        out
    }

    /// The 3×3 interior anchor lattice at quarter points.
    pub fn anchors(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(9);
        for r in 1..=3 {
            for c in 1..=3 {
                out.push([
                    self.min[0] + c as f64 / 4.0 * (self.max[0] - self.min[0]),
                    self.min[1] + r as f64 / 4.0 * (self.max[1] - self.min[1]),
                ]);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if (0..2).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(Error::invalid("table bounds must be a non-empty finite rectangle"))
        }
    }
}

/// Object positions on a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub item_positions: Vec<Point>,
    pub table_bounds: Bounds,
}

impl TableConfig {
    pub fn new(item_positions: Vec<Point>, table_bounds: Bounds) -> Result<Self> {
        let cfg = Self {
            item_positions,
            table_bounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.table_bounds.validate()?;
        if let Some(p) = self.item_positions.iter().find(|&&p| !self.table_bounds.contains(p)) {
            return Err(Error::invalid(format!("item at {p:?} lies outside the table")));
        }
        Ok(())
    }

    pub fn fixed_grid(&self) -> Vec<Point> {
        self.table_bounds.anchors()
    }

    pub fn num_weights(&self) -> usize {
        self.item_positions.len() + 9
    }

    /// Basis centres: items first, then the anchors.
    pub fn centers(&self) -> Vec<Point> {
        let mut c = self.item_positions.clone();
        c.extend(self.fixed_grid());
        c
    }

    pub fn widths(&self) -> Vec<f64> {
        let mut w = vec![OBJECT_WIDTH; self.item_positions.len()];
        w.extend([ANCHOR_WIDTH; 9]);
        w
    }

    pub fn random<R: Rng + ?Sized>(num_items: usize, bounds: Bounds, rng: &mut R) -> Self {
        Self {
            item_positions: (0..num_items).map(|_| bounds.sample(rng)).collect(),
            table_bounds: bounds,
        }
    }

    /// Copy with one uniformly chosen item moved to a uniform position.
    pub fn perturb_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        if !out.item_positions.is_empty() {
            let i = rng.random_range(0..out.item_positions.len());
            out.item_positions[i] = self.table_bounds.sample(rng);
        }
        out
    }

    pub fn reward(&self, weights: &[f64]) -> Result<RbfReward> {
        RbfReward::new(self.centers(), self.widths(), weights.to_vec())
    }

    /// Basis values at `points`, one row per point.
    pub fn basis(&self, points: &[Point]) -> Array2<f64> {
        let centers = self.centers();
        let widths = self.widths();
        Array2::from_shape_fn((points.len(), centers.len()), |(p, i)| rbf(points[p], centers[i], widths[i]))
    }
}

fn rbf(x: Point, c: Point, width: f64) -> f64 {
    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    (-d2 / width).exp()
}

/// `R(x) = Σ wᵢ exp(−‖x − cᵢ‖² / σᵢ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfReward {
    pub centers: Vec<Point>,
    pub widths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RbfReward {
    pub fn new(centers: Vec<Point>, widths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if centers.len() != widths.len() || centers.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} centers, {} widths and {} weights must agree",
                centers.len(),
                widths.len(),
                weights.len()
            )));
        }
        if widths.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("RBF widths must be positive"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("RBF weights must be finite"));
        }
        Ok(Self { centers, widths, weights })
    }
}

pub fn rbf_reward(x: Point, model: &RbfReward) -> f64 {
    model
        .centers
        .iter()
        .zip(&model.widths)
        .zip(&model.weights)
        .map(|((&c, &s), &w)| w * rbf(x, c, s))
        .sum()
}

/// `∇ₓR(x) = Σ wᵢ · rbf(x, cᵢ, σᵢ²) · (2cᵢ − 2x) / σᵢ²`.
pub fn rbf_gradient(x: Point, model: &RbfReward) -> Point {
    let mut g = [0.0; 2];
    for ((&c, &s), &w) in model.centers.iter().zip(&model.widths).zip(&model.weights) {
        let k = w * rbf(x, c, s) / s;
        g[0] += k * 2.0 * (c[0] - x[0]);
        g[1] += k * 2.0 * (c[1] - x[1]);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub point: Point,
    pub reward: f64,
    /// Every weight is zero, so any point is optimal; `point` is the table centre.
    pub degenerate: bool,
}

fn value_and_gradient(x: Point, model: &RbfReward) -> (f64, Point) {
    let mut r = 0.0;
    let mut g = [0.0; 2];
    for ((&c, &s), &w) in model.centers.iter().zip(&model.widths).zip(&model.weights) {
        let v = w * rbf(x, c, s);
        r += v;
        let k = 2.0 * v / s;
        g[0] += k * (c[0] - x[0]);
        g[1] += k * (c[1] - x[1]);
    }
    (r, g)
}

/// Projected gradient ascent from `start`. Each iteration tries the last
/// accepted step doubled (capped) and halves it until the reward improves.
pub fn ascend(model: &RbfReward, bounds: &Bounds, start: Point) -> (Point, f64) {
    let mut x = bounds.clamp(start);
    let (mut r, mut g) = value_and_gradient(x, model);
    let mut step = ASCENT_STEP;
    for _ in 0..ASCENT_MAX_ITERATIONS {
        let mut gain = None;
        while step > MIN_STEP {
            let y = bounds.clamp([x[0] + step * g[0], x[1] + step * g[1]]);
            if y == x {
                break;
            }
            let (ry, gy) = value_and_gradient(y, model);
            if ry > r {
                gain = Some(ry - r);
                (x, r, g) = (y, ry, gy);
                break;
            }
            step *= 0.5;
        }
        match gain {
            Some(d) if d >= ASCENT_MIN_IMPROVEMENT => step = (2.0 * step).min(ASCENT_MAX_STEP),
            _ => break,
        }
    }
    (x, r)
}

fn degenerate(model: &RbfReward) -> bool {
    model.weights.iter().all(|&w| w == 0.0)
}

fn better(a: (Point, f64), b: (Point, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && (a.0[0], a.0[1]) < (b.0[0], b.0[1]))
}

/// Best of gradient ascent from `restarts` uniform seeds and from every
/// positive-weight centre.
pub fn best_placement<R: Rng + ?Sized>(model: &RbfReward, bounds: &Bounds, restarts: usize, rng: &mut R) -> Result<Placement> {
    bounds.validate()?;
    if restarts == 0 {
        return Err(Error::invalid("best_placement needs at least one restart"));
    }
    if degenerate(model) {
        let c = bounds.center();
        return Ok(Placement {
            point: c,
            reward: 0.0,
            degenerate: true,
        });
    }
    let mut seeds: Vec<Point> = (0..restarts).map(|_| bounds.sample(rng)).collect();
    seeds.extend(model.centers.iter().zip(&model.weights).filter(|(_, &w)| w > 0.0).map(|(&c, _)| c));
    Ok(best_of(model, bounds, seeds))
}

fn best_of(model: &RbfReward, bounds: &Bounds, seeds: Vec<Point>) -> Placement {
    let mut best = ([f64::NAN; 2], f64::NEG_INFINITY);
    for s in seeds {
        let cand = ascend(model, bounds, s);
        if better(cand, best) {
            best = cand;
        }
    }
    Placement {
        point: best.0,
        reward: best.1,
        degenerate: false,
    }
}

/// Indices of the `k` highest lattice local maxima (4-neighbourhood), best first.
fn lattice_peaks(values: ArrayView1<'_, f64>, side: usize, k: usize) -> Vec<usize> {
    let mut peaks: Vec<usize> = (0..values.len())
        .filter(|&i| {
            let (r, c) = (i / side, i % side);
            let v = values[i];
            let mut ok = true;
            if r > 0 {
                ok &= v >= values[i - side];
            }
            if r + 1 < side {
                ok &= v >= values[i + side];
            }
            if c > 0 {
                ok &= v >= values[i - 1];
            }
            if c + 1 < side {
                ok &= v >= values[i + 1];
            }
            ok
        })
        .collect();
    peaks.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    peaks.truncate(k);
    peaks
}

/// Precomputed basis values for solving many hypotheses on one configuration.
#[derive(Debug, Clone)]
pub struct PlacementSolver {
    config: TableConfig,
    lattice: Vec<Point>,
    basis: Array2<f64>,
}

impl PlacementSolver {
    pub fn new(config: &TableConfig) -> Result<Self> {
        config.validate()?;
        let lattice = config.table_bounds.lattice(SEED_LATTICE_SIDE);
        let basis = config.basis(&lattice);
        Ok(Self {
            config: config.clone(),
            lattice,
            basis,
        })
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    /// Deterministic optimum for one weight vector: ascent from the best
    /// lattice peaks and from every positive-weight centre.
    pub fn solve(&self, weights: ArrayView1<'_, f64>) -> Result<Placement> {
        let values = self.basis.dot(&weights);
        self.solve_with(weights, values.view(), true)
    }

    /// Optima of every row of `weights`, seeded from lattice peaks only;
    /// consecutive identical rows share one solve.
    pub fn solve_all(&self, weights: &Array2<f64>) -> Result<Vec<Placement>> {
        let values = self.basis.dot(&weights.t());
        let mut out: Vec<Placement> = Vec::with_capacity(weights.nrows());
        for (i, w) in weights.rows().into_iter().enumerate() {
            if i > 0 && w == weights.row(i - 1) {
                out.push(out[i - 1]);
                continue;
            }
            out.push(self.solve_with(w, values.column(i), false)?);
        }
        Ok(out)
    }

    fn solve_with(&self, weights: ArrayView1<'_, f64>, values: ArrayView1<'_, f64>, centers: bool) -> Result<Placement> {
        let model = self.config.reward(weights.as_slice().map_or(&weights.to_vec(), |s| s))?;
        let bounds = &self.config.table_bounds;
        if degenerate(&model) {
            return Ok(Placement {
                point: bounds.center(),
                reward: 0.0,
                degenerate: true,
            });
        }
        let mut seeds: Vec<Point> = lattice_peaks(values, SEED_LATTICE_SIDE, SEEDS_PER_HYPOTHESIS)
            .into_iter()
            .map(|i| self.lattice[i])
            .collect();
        if centers {
            seeds.extend(model.centers.iter().zip(&model.weights).filter(|(_, &w)| w > 0.0).map(|(&c, _)| c));
        }
        Ok(best_of(&model, bounds, seeds))
    }
}

/// Deterministic optimal placement of `weights` on `config`.
pub fn optimal_placement(config: &TableConfig, weights: &[f64]) -> Result<Placement> {
    PlacementSolver::new(config)?.solve(ArrayView1::from(weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementDemo {
    pub config: TableConfig,
    pub placement: Point,
}

impl PlacementDemo {
    pub fn new(config: TableConfig, placement: Point) -> Result<Self> {
        config.validate()?;
        if !config.table_bounds.contains(placement) {
            return Err(Error::invalid(format!("placement {placement:?} lies outside the table")));
        }
        Ok(Self { config, placement })
    }
}

/// One demonstration's basis values at the placement and on the quadrature grid.
#[derive(Debug, Clone)]
struct DemoTerm {
    at_placement: Array1<f64>,
    /// One row per basis function, one column per grid point.
    grid: Array2<f64>,
}

impl DemoTerm {
    fn new(demo: &PlacementDemo) -> Self {
        Self {
            at_placement: demo.config.basis(&[demo.placement]).row(0).to_owned(),
            grid: demo.config.basis(&demo.config.table_bounds.cell_centers(QUADRATURE_SIDE)).reversed_axes().as_standard_layout().into_owned(),
        }
    }

    fn grid_rewards(&self, weights: ArrayView1<'_, f64>) -> Array1<f64> {
        weights.dot(&self.grid)
    }

    /// `c·R(placement) − log Σ_grid exp(c·R)` given the grid rewards.
    fn log_likelihood_from(&self, weights: ArrayView1<'_, f64>, grid_rewards: &Array1<f64>, c: f64) -> f64 {
        let m = c * grid_rewards.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + grid_rewards.iter().map(|&v| (c * v - m).exp()).sum::<f64>().ln();
        c * self.at_placement.dot(&weights) - lse
    }

    fn log_likelihood(&self, weights: ArrayView1<'_, f64>, c: f64) -> f64 {
        self.log_likelihood_from(weights, &self.grid_rewards(weights), c)
    }
}

/// Boltzmann log-likelihood of the demonstrations, normalized over the
/// centres of a 50×50 grid of cells on each demonstration's table.
pub fn placement_log_likelihood(demos: &[PlacementDemo], weights: &[f64], c: f64) -> Result<f64> {
    if c.is_nan() || c < 0.0 {
        return Err(Error::invalid("confidence must be non-negative"));
    }
    let w = ArrayView1::from(weights);
    demos
        .iter()
        .map(|d| {
            if d.config.num_weights() != weights.len() {
                return Err(Error::invalid(format!(
                    "demonstration has {} basis functions but {} weights were given",
                    d.config.num_weights(),
                    weights.len()
                )));
            }
            Ok(DemoTerm::new(d).log_likelihood(w, c))
        })
        .sum()
}

/// Chain target over placement demonstrations with a uniform prior.
pub struct PlacementTarget {
    terms: Vec<DemoTerm>,
    dim: usize,
    confidence: f64,
}

impl PlacementTarget {
    pub fn new(demos: &[PlacementDemo], confidence: f64) -> Result<Self> {
        let first = demos.first().ok_or(Error::Empty("placement demonstrations"))?;
        let dim = first.config.num_weights();
        if demos.iter().any(|d| d.config.num_weights() != dim) {
            return Err(Error::invalid("all demonstrations need the same number of items"));
        }
        if confidence.is_nan() || confidence < 0.0 {
            return Err(Error::invalid("confidence must be non-negative"));
        }
        Ok(Self {
            terms: demos.iter().map(DemoTerm::new).collect(),
            dim,
            confidence,
        })
    }
}

/// Grid rewards of the chain's current state, reused to update proposals
/// that rescale the state and change few coordinates.
#[derive(Debug, Clone)]
pub struct GridCache {
    weights: Vec<f64>,
    rewards: Vec<Array1<f64>>,
}

/// Sparse update limit; denser changes recompute from scratch.
const MAX_CHANGED_COORDS: usize = 2;

impl PlacementTarget {
    fn grid_rewards(&self, weights: &[f64], current: Option<&GridCache>) -> Vec<Array1<f64>> {
        let w = ArrayView1::from(weights);
        if let Some(cur) = current {
            if let Some((scale, changed)) = rescaled_change(&cur.weights, weights) {
                return self
                    .terms
                    .iter()
                    .zip(&cur.rewards)
                    .map(|(t, r)| {
                        let mut out = r * scale;
                        for &(i, d) in &changed {
                            out.scaled_add(d, &t.grid.row(i));
                        }
                        out
                    })
                    .collect();
            }
        }
        self.terms.iter().map(|t| t.grid_rewards(w)).collect()
    }
}

/// Writes `new = scale·old + Σ dᵢ eᵢ` with at most [`MAX_CHANGED_COORDS`] terms.
fn rescaled_change(old: &[f64], new: &[f64]) -> Option<(f64, Vec<(usize, f64)>)> {
    let pivot = (0..old.len())
        .filter(|&i| old[i] != 0.0)
        .max_by(|&a, &b| old[a].abs().total_cmp(&old[b].abs()))?;
    // The pivot itself may be the changed coordinate; try the runner-up too.
    let mut pivots = vec![pivot];
    if let Some(second) = (0..old.len())
        .filter(|&i| i != pivot && old[i] != 0.0)
        .max_by(|&a, &b| old[a].abs().total_cmp(&old[b].abs()))
    {
        pivots.push(second);
    }
    for p in pivots {
        let scale = new[p] / old[p];
        let changed: Vec<(usize, f64)> = (0..old.len())
            .map(|i| (i, new[i] - scale * old[i]))
            .filter(|&(_, d)| d.abs() > 1e-14)
            .collect();
        if changed.len() <= MAX_CHANGED_COORDS {
            return Some((scale, changed));
        }
    }
    None
}

impl Target for PlacementTarget {
    type Cache = GridCache;

    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, weights: &[f64], current: Option<&GridCache>) -> Result<Scored<GridCache>> {
        let rewards = self.grid_rewards(weights, current);
        let w = ArrayView1::from(weights);
        let log_posterior = self
            .terms
            .iter()
            .zip(&rewards)
            .map(|(t, r)| t.log_likelihood_from(w, r, self.confidence))
            .sum();
        Ok(Scored {
            log_posterior,
            cache: GridCache {
                weights: weights.to_vec(),
                rewards,
            },
            clamped: 0,
        })
    }
}

/// Metropolis-Hastings posterior over RBF weights on the unit L1 sphere.
pub fn placement_posterior(
    demos: &[PlacementDemo],
    confidence: f64,
    chain: &ChainConfig,
    start: Option<&[f64]>,
) -> Result<PosteriorSamples> {
    placement_chain(demos, confidence, chain, start).map(|(samples, _)| samples)
}

/// Posterior samples plus the highest-scoring state the chain visited, which
/// is a less noisy MAP estimate than the best thinned sample.
pub fn placement_chain(
    demos: &[PlacementDemo],
    confidence: f64,
    chain: &ChainConfig,
    start: Option<&[f64]>,
) -> Result<(PosteriorSamples, Vec<f64>)> {
    sample_placement_target(&PlacementTarget::new(demos, confidence)?, chain, start)
}

fn sample_placement_target(target: &PlacementTarget, chain: &ChainConfig, start: Option<&[f64]>) -> Result<(PosteriorSamples, Vec<f64>)> {
    let out = sample_chain(target, chain, start)?;
    let samples = PosteriorSamples::new(out.weights, out.log_posteriors, None)?.with_stats(out.stats);
    Ok((samples, out.best_weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigVar {
    pub bound: f64,
    pub sufficient: bool,
    /// Where the MAP hypothesis would place the item.
    pub map_placement: Point,
}

/// Placement distances between each sample's optimum and the MAP optimum.
pub fn placement_losses(config: &TableConfig, samples: &PosteriorSamples, map_weights: &[f64]) -> Result<(Point, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("posterior samples"));
    }
    let solver = PlacementSolver::new(config)?;
    let map = solver.solve(ArrayView1::from(map_weights))?.point;
    let losses = solver
        .solve_all(samples.weights())?
        .iter()
        .map(|p| distance(p.point, map))
        .collect();
    Ok((map, losses))
}

/// α-VaR upper bound on the placement distance at `config`.
pub fn config_var(config: &TableConfig, samples: &PosteriorSamples, map_weights: &[f64], alpha: f64, delta: f64) -> Result<ConfigVar> {
    let (map, losses) = placement_losses(config, samples, map_weights)?;
    let VarBound { bound, sufficient } = var_upper_bound(&losses, alpha, delta)?;
    Ok(ConfigVar {
        bound,
        sufficient,
        map_placement: map,
    })
}

/// Index of the candidate with the largest bound (lowest index on ties) and every bound.
pub fn select_config_query(
    candidates: &[TableConfig],
    samples: &PosteriorSamples,
    map_weights: &[f64],
    alpha: f64,
    delta: f64,
) -> Result<(usize, Vec<ConfigVar>)> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate configurations"));
    }
    let vars = candidates
        .iter()
        .map(|c| config_var(c, samples, map_weights, alpha, delta))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, v) in vars.iter().enumerate() {
        if v.bound > vars[best].bound {
            best = i;
        }
    }
    Ok((best, vars))
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementErrors {
    pub mean: f64,
    pub max: f64,
    pub per_config: Vec<f64>,
}

/// Distance between the learned and true optimal placements over test configurations.
pub fn placement_errors(learned: &[f64], truth_optima: &[Point], test_configs: &[TableConfig]) -> Result<PlacementErrors> {
    if test_configs.is_empty() {
        return Err(Error::Empty("test configurations"));
    }
    if truth_optima.len() != test_configs.len() {
        return Err(Error::invalid("one true optimum per test configuration is required"));
    }
    let per_config = test_configs
        .iter()
        .zip(truth_optima)
        .map(|(c, &t)| Ok(distance(optimal_placement(c, learned)?.point, t)))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_config.iter().sum::<f64>() / per_config.len() as f64;
    let max = per_config.iter().fold(0.0f64, |m, &e| m.max(e));
    Ok(PlacementErrors { mean, max, per_config })
}

/// True optimal placements for a set of configurations.
pub fn true_optima(truth: &[f64], configs: &[TableConfig]) -> Result<Vec<Point>> {
    configs.iter().map(|c| Ok(optimal_placement(c, truth)?.point)).collect()
}

/// The two synthetic placement preferences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Centre of the table, away from the four other objects.
    Vase,
    /// Into the bowl (item 0) among six distractors.
    Spoon,
}

impl Scenario {
    pub fn num_items(self) -> usize {
        match self {
            Scenario::Vase => 4,
            Scenario::Spoon => 7,
        }
    }

    /// L1-normalized ground-truth weights (items, then anchors row-major).
    pub fn true_weights(self) -> Vec<f64> {
        let n = self.num_items();
        let mut w = vec![0.0; n + 9];
        match self {
            Scenario::Vase => {
                w[..n].fill(-0.1);
                w[n + 4] = 0.6;
            }
            Scenario::Spoon => {
                w[0] = 0.7;
                w[1..n].fill(-0.05);
            }
        }
        l1_normalize(&mut w);
        w
    }
}

/// Knobs of the placement active-learning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub alpha: f64,
    pub delta: f64,
    /// Boltzmann confidence of the placement likelihood.
    pub confidence: f64,
    pub chain: ChainConfig,
    /// Candidate configurations scored per query.
    pub candidates: usize,
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            alpha: crate::risk::DEFAULT_ALPHA,
            delta: crate::risk::DEFAULT_DELTA,
            confidence: 50.0,
            chain: ChainConfig {
                num_samples: 100,
                burn_in: 200,
                thin: 5,
                ..ChainConfig::default()
            },
            candidates: 50,
            warm_start: true,
            seed: 0,
        }
    }
}

/// Posterior after a set of placement demonstrations.
#[derive(Debug, Clone)]
pub struct PlacementState {
    pub demos: Vec<PlacementDemo>,
    pub posterior: PosteriorSamples,
    pub map_weights: Vec<f64>,
}

/// A proposed query configuration and its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigQuery {
    pub config: TableConfig,
    pub index: usize,
    pub var: ConfigVar,
    /// Largest bound over the candidates, known only when all were scored.
    pub max_bound: Option<f64>,
}

pub struct PlacementLearner<'a> {
    pub config: &'a PlacementConfig,
}

impl<'a> PlacementLearner<'a> {
    pub fn new(config: &'a PlacementConfig) -> Self {
        Self { config }
    }

    fn chain(&self, iteration: usize, warm: bool) -> ChainConfig {
        let mut c = self.config.chain.clone();
        c.rng_seed = derive_seed(self.config.chain.rng_seed, iteration as u64);
        if warm {
            c.burn_in /= 2;
        }
        c
    }

    pub fn posterior(&self, demos: Vec<PlacementDemo>, warm: Option<&[f64]>) -> Result<PlacementState> {
        let iteration = demos.len();
        let start = warm.filter(|_| self.config.warm_start);
        let (posterior, map_weights) = placement_chain(&demos, self.config.confidence, &self.chain(iteration, start.is_some()), start)?;
        Ok(PlacementState {
            demos,
            posterior,
            map_weights,
        })
    }

    /// Prior samples before any demonstration, for tables with `num_items` items.
    pub fn prior(&self, num_items: usize) -> Result<PlacementState> {
        let target = PlacementTarget {
            terms: Vec::new(),
            dim: num_items + 9,
            confidence: self.config.confidence,
        };
        let (posterior, map_weights) = sample_placement_target(&target, &self.chain(0, false), None)?;
        Ok(PlacementState {
            demos: Vec::new(),
            posterior,
            map_weights,
        })
    }

    pub fn incorporate(&self, state: &PlacementState, demo: PlacementDemo) -> Result<PlacementState> {
        let mut demos = state.demos.clone();
        demos.push(demo);
        self.posterior(demos, Some(&state.map_weights))
    }

    /// Candidates around `base`, each moving one item, seeded by the iteration.
    pub fn candidates(&self, base: &TableConfig, iteration: usize) -> Vec<TableConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, iteration as u64));
        (0..self.config.candidates).map(|_| base.perturb_one(&mut rng)).collect()
    }

    /// Picks a candidate per `strategy`. VaR selection scores every
    /// candidate; random selection only scores the one it draws. Entropy has
    /// no placement analogue and is rejected.
    pub fn select(&self, state: &PlacementState, candidates: &[TableConfig], strategy: Strategy, iteration: usize) -> Result<ConfigQuery> {
        let (alpha, delta) = (self.config.alpha, self.config.delta);
        match strategy {
            Strategy::Activevar => {
                let (index, mut vars) = select_config_query(candidates, &state.posterior, &state.map_weights, alpha, delta)?;
                let var = vars.swap_remove(index);
                Ok(ConfigQuery {
                    config: candidates[index].clone(),
                    index,
                    max_bound: Some(var.bound),
                    var,
                })
            }
            Strategy::Random => {
                if candidates.is_empty() {
                    return Err(Error::Empty("candidate configurations"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.config.seed, iteration as u64), 1));
                let index = rng.random_range(0..candidates.len());
                let var = config_var(&candidates[index], &state.posterior, &state.map_weights, alpha, delta)?;
                Ok(ConfigQuery {
                    config: candidates[index].clone(),
                    index,
                    var,
                    max_bound: None,
                })
            }
            Strategy::Entropy => Err(Error::invalid("entropy selection is not defined for placement queries")),
        }
    }
}

/// Mean of every column of the posterior, useful for diagnostics.
pub fn posterior_mean(samples: &PosteriorSamples) -> Result<Array1<f64>> {
    samples.weights().mean_axis(Axis(0)).ok_or(Error::Empty("posterior samples"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(c: Point, s: f64, w: f64) -> RbfReward {
        RbfReward::new(vec![c], vec![s], vec![w]).unwrap()
    }

    #[test]
    fn reward_examples() {
        assert_eq!(rbf_reward([0.3, 0.4], &single([0.3, 0.4], 0.5, 1.0)), 1.0);
        let r = rbf_reward([1.0, 0.0], &single([0.0, 0.0], 1.0, 1.0));
        assert!((r - (-1.0f64).exp()).abs() < 1e-15);
        let zero = RbfReward::new(vec![[0.1, 0.2], [0.5, 0.5]], vec![0.1, 0.2], vec![0.0, 0.0]).unwrap();
        assert_eq!(rbf_reward([0.7, 0.1], &zero), 0.0);
    }

    #[test]
    fn gradient_vanishes_at_center_and_midpoint() {
        assert_eq!(rbf_gradient([0.2, 0.2], &single([0.2, 0.2], 0.1, 2.0)), [0.0, 0.0]);
        let pair = RbfReward::new(vec![[0.2, 0.5], [0.8, 0.5]], vec![0.05, 0.05], vec![1.0, 1.0]).unwrap();
        let g = rbf_gradient([0.5, 0.5], &pair);
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(RbfReward::new(vec![[0.0, 0.0]], vec![0.0], vec![1.0]).is_err());
        assert!(RbfReward::new(vec![[0.0, 0.0]], vec![1.0], vec![]).is_err());
        assert!(TableConfig::new(vec![[1.5, 0.0]], Bounds::unit()).is_err());
        assert!(PlacementDemo::new(TableConfig::new(vec![], Bounds::unit()).unwrap(), [0.5, -0.1]).is_err());
    }

    #[test]
    fn single_positive_rbf_is_found() {
        let m = single([0.31, 0.72], 0.02, 1.0);
        let p = best_placement(&m, &Bounds::unit(), 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(distance(p.point, [0.31, 0.72]) < 1e-6, "{p:?}");
    }

    #[test]
    fn zero_weights_give_degenerate_center() {
        let cfg = TableConfig::new(vec![[0.2, 0.2]], Bounds::unit()).unwrap();
        let p = best_placement(&cfg.reward(&[0.0; 10]).unwrap(), &Bounds::unit(), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.point, [0.5, 0.5]);
        assert!(optimal_placement(&cfg, &[0.0; 10]).unwrap().degenerate);
        assert!(best_placement(&single([0.0, 0.0], 1.0, 1.0), &Bounds::unit(), 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn uniform_confidence_gives_log_grid_size() {
        let cfg = TableConfig::new(vec![[0.2, 0.3], [0.6, 0.6]], Bounds::unit()).unwrap();
        let demos = vec![
            PlacementDemo::new(cfg.clone(), [0.1, 0.1]).unwrap(),
            PlacementDemo::new(cfg, [0.9, 0.4]).unwrap(),
        ];
        let w: Vec<f64> = (0..11).map(|i| (i as f64 - 5.0) / 30.0).collect();
        let ll = placement_log_likelihood(&demos, &w, 0.0).unwrap();
        assert!((ll + 2.0 * 2500f64.ln()).abs() < 1e-9);
        assert!(placement_log_likelihood(&demos, &w[..3], 1.0).is_err());
        assert!(placement_log_likelihood(&demos, &w, -1.0).is_err());
    }

    #[test]
    fn demo_at_peak_is_more_likely_than_at_trough() {
        let cfg = TableConfig::new(vec![[0.3, 0.3]], Bounds::unit()).unwrap();
        let mut w = vec![0.0; 10];
        w[0] = 1.0;
        let at = |p| placement_log_likelihood(&[PlacementDemo::new(cfg.clone(), p).unwrap()], &w, 20.0).unwrap();
        assert!(at([0.3, 0.3]) > at([1.0, 1.0]));
    }

    #[test]
    fn flat_placement_posterior_accepts_everything() {
        let cfg = TableConfig::new(vec![[0.3, 0.3]], Bounds::unit()).unwrap();
        let demos = vec![PlacementDemo::new(cfg, [0.5, 0.5]).unwrap()];
        let chain = ChainConfig {
            num_samples: 50,
            burn_in: 10,
            ..ChainConfig::default()
        };
        let post = placement_posterior(&demos, 0.0, &chain, None).unwrap();
        assert_eq!(post.stats().acceptance_rate(), 1.0);
        let again = placement_posterior(&demos, 0.0, &chain, None).unwrap();
        assert_eq!(post.weights(), again.weights());
    }

    fn fixed_posterior(rows: Vec<Vec<f64>>) -> PosteriorSamples {
        let n = rows.len();
        let d = rows[0].len();
        let w = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).unwrap();
        PosteriorSamples::new(w, vec![0.0; n], None).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_var() {
        let cfg = TableConfig::new(vec![[0.2, 0.7]], Bounds::unit()).unwrap();
        let w = Scenario::Vase.true_weights()[3..].to_vec();
        let post = fixed_posterior(vec![w.clone(); 30]);
        let v = config_var(&cfg, &post, &w, 0.95, 0.05).unwrap();
        assert_eq!(v.bound, 0.0);
    }

    #[test]
    fn two_sample_bound_is_the_larger_distance() {
        // Item RBFs at 0.1 m and 0.3 m from the MAP optimum at the first item.
        let cfg = TableConfig::new(vec![[0.5, 0.5], [0.6, 0.5], [0.8, 0.5]], Bounds::unit()).unwrap();
        let hyp = |i: usize| {
            let mut w = vec![0.0; 12];
            w[i] = 1.0;
            w
        };
        let post = fixed_posterior(vec![hyp(1), hyp(2)]);
        // n = 2 is below the order statistic for any useful level, so the bound is the sample maximum.
        let v = config_var(&cfg, &post, &hyp(0), 0.5, 0.5).unwrap();
        assert!((v.bound - 0.3).abs() < 1e-6, "{v:?}");
        let (_, losses) = placement_losses(&cfg, &post, &hyp(0)).unwrap();
        assert!((losses[0] - 0.1).abs() < 1e-6 && (losses[1] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn selection_prefers_uncertain_candidates() {
        let far = TableConfig::new(vec![[0.5, 0.5], [0.9, 0.9]], Bounds::unit()).unwrap();
        let same = TableConfig::new(vec![[0.5, 0.5], [0.5, 0.5]], Bounds::unit()).unwrap();
        let mut a = vec![0.0; 11];
        a[0] = 1.0;
        let mut b = vec![0.0; 11];
        b[1] = 1.0;
        let post = fixed_posterior(vec![a.clone(), b]);
        let (i, vars) = select_config_query(&[same.clone(), far], &post, &a, 0.5, 0.5).unwrap();
        assert_eq!(i, 1);
        assert_eq!(vars[0].bound, 0.0);
        assert_eq!(select_config_query(&[same], &post, &a, 0.5, 0.5).unwrap().0, 0);
        assert!(select_config_query(&[], &post, &a, 0.5, 0.5).is_err());
    }

    #[test]
    fn learned_equal_truth_has_no_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tests: Vec<TableConfig> = (0..5).map(|_| TableConfig::random(4, Bounds::unit(), &mut rng)).collect();
        let w = Scenario::Vase.true_weights();
        let opt = true_optima(&w, &tests).unwrap();
        let e = placement_errors(&w, &opt, &tests).unwrap();
        assert_eq!((e.mean, e.max), (0.0, 0.0));
    }

    #[test]
    fn candidates_are_reproducible_and_move_one_item() {
        let cfg = PlacementConfig::default();
        let learner = PlacementLearner::new(&cfg);
        let base = TableConfig::random(4, Bounds::unit(), &mut ChaCha8Rng::seed_from_u64(9));
        let a = learner.candidates(&base, 2);
        assert_eq!(a, learner.candidates(&base, 2));
        assert_eq!(a.len(), 50);
        for c in &a {
            let moved = c.item_positions.iter().zip(&base.item_positions).filter(|(x, y)| x != y).count();
            assert!(moved <= 1);
        }
    }

    #[test]
    fn scenario_weights_are_normalized() {
        for s in [Scenario::Vase, Scenario::Spoon] {
            let w = s.true_weights();
            assert_eq!(w.len(), s.num_items() + 9);
            assert!((w.iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn arb_model() -> impl proptest::strategy::Strategy<Value = RbfReward> {
        let parts = prop::collection::vec(((0.0..1.0f64, 0.0..1.0f64), 0.01..0.2f64, -1.0..1.0f64), 1..6);
        proptest::strategy::Strategy::prop_map(parts, |v| {
            RbfReward::new(
                v.iter().map(|&((x, y), _, _)| [x, y]).collect(),
                v.iter().map(|&(_, s, _)| s).collect(),
                v.iter().map(|&(_, _, w)| w).collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn losses_are_translation_invariant(dx in -0.3..0.3f64, dy in -0.3..0.3f64, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bounds = Bounds { min: [0.0, 0.0], max: [1.0, 1.0] };
            let cfg = TableConfig::random(3, bounds, &mut rng);
            let rows: Vec<Vec<f64>> = (0..4).map(|_| crate::irl::chain::random_l1_point(12, &mut rng)).collect();
            let post = fixed_posterior(rows.clone());
            let (_, base) = placement_losses(&cfg, &post, &rows[0]).unwrap();
            let shifted_bounds = Bounds { min: [dx, dy], max: [1.0 + dx, 1.0 + dy] };
            let shifted = TableConfig::new(cfg.item_positions.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(), shifted_bounds).unwrap();
            let (_, moved) = placement_losses(&shifted, &post, &rows[0]).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn config_var_ignores_sample_order(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = TableConfig::random(2, Bounds::unit(), &mut rng);
            let rows: Vec<Vec<f64>> = (0..80).map(|_| crate::irl::chain::random_l1_point(11, &mut rng)).collect();
            let mut rev = rows.clone();
            rev.reverse();
            let a = config_var(&cfg, &fixed_posterior(rows.clone()), &rows[0], 0.95, 0.05).unwrap();
            let b = config_var(&cfg, &fixed_posterior(rev), &rows[0], 0.95, 0.05).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ascent_never_decreases_reward(model in arb_model(), x in 0.0..1.0f64, y in 0.0..1.0f64) {
            let (p, r) = ascend(&model, &Bounds::unit(), [x, y]);
            prop_assert!(r >= rbf_reward([x, y], &model));
            prop_assert!(Bounds::unit().contains(p));
        }
    }
}
