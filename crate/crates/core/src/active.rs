//! Active query selection and the active-learning loop.
//!
//! Each iteration picks a state (VaR, entropy or uniformly random), asks the
//! demonstrator for an action there or for a critique of the current policy's
//! rollout from it, folds the answer into the demonstration set and re-samples
//! the reward posterior. The loop stops once the largest per-state VaR bound
//! of the MAP policy drops below `epsilon`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{rollout, Oracle, RolloutMode};
use crate::irl::{policy_walk_mcmc_from, ChainConfig, DemonstrationSet, PosteriorSamples};
use crate::mdp::{greedy_policy, Policy, TabularMdp};
use crate::risk::{per_state_var, LossKind, VarReport, DEFAULT_ALPHA, DEFAULT_DELTA};

/// `(state, action)` pairs in visiting order.
pub type Trajectory = Vec<(usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Good,
    Bad,
}

/// Trajectory indices `start..=end` carrying one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: SegmentLabel,
}

/// Segments must be ordered, contiguous and cover `0..len` exactly.
pub fn validate_segments(segments: &[Segment], len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Validation("cannot critique an empty trajectory".into()));
    }
    let mut next = 0;
    for (i, seg) in segments.iter().enumerate() {
        if seg.start > seg.end {
            return Err(Error::Validation(format!("segment {i} ends before it starts")));
        }
        if seg.start != next {
            let what = if seg.start > next { "gap" } else { "overlap" };
            return Err(Error::Validation(format!("{what} before segment {i} at index {next}")));
        }
        next = seg.end + 1;
    }
    if next != len {
        return Err(Error::Validation(format!(
            "segments cover {next} of {len} trajectory steps"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    Action { state: usize },
    Critique { state: usize, trajectory: Trajectory },
    Placement { configuration: usize },
}

impl Query {
    pub fn state(&self) -> Option<usize> {
        match self {
            Query::Action { state } | Query::Critique { state, .. } => Some(*state),
            Query::Placement { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryAnswer {
    Action { action: usize },
    Critique { segments: Vec<Segment> },
    Placement { x: f64, y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(alias = "active_var", alias = "var")]
    Activevar,
    Entropy,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Activevar, Strategy::Entropy, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Activevar => "activevar",
            Strategy::Entropy => "entropy",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "activevar" | "active_var" | "var" => Ok(Strategy::Activevar),
            "entropy" | "as" => Ok(Strategy::Entropy),
            "random" => Ok(Strategy::Random),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Action,
    Critique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    pub alpha: f64,
    pub delta: f64,
    pub chain: ChainConfig,
    /// Critique trajectory length.
    pub critique_len: usize,
    pub rollout: RolloutMode,
    pub loss: LossKind,
    /// Re-sample from the previous MAP weights with half the burn-in.
    pub warm_start: bool,
    /// Candidate states; `None` means every state.
    pub candidates: Option<Vec<usize>>,
    /// Seed for random query choice and sampled rollouts.
    pub query_seed: u64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            chain: ChainConfig::default(),
            critique_len: 8,
            rollout: RolloutMode::MostLikely,
            loss: LossKind::Evd,
            warm_start: true,
            candidates: None,
            query_seed: 0,
        }
    }
}

/// SplitMix64 finalizer; gives each iteration its own seed stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query: Query,
    pub answer: QueryAnswer,
    /// Largest per-state bound after incorporating the answer.
    pub max_var: f64,
}

#[derive(Debug, Clone)]
pub struct LoopState {
    pub demos: DemonstrationSet,
    pub posterior: PosteriorSamples,
    pub map_weights: Array1<f64>,
    /// Greedy policy of the MAP reward.
    pub eval_policy: Policy,
    /// Per-state bounds of `eval_policy` under `posterior`.
    pub report: VarReport,
    pub initial_max_var: f64,
    pub history: Vec<HistoryEntry>,
    pub epsilon: f64,
    pub stopped: bool,
}

impl LoopState {
    pub fn max_var(&self) -> f64 {
        self.report.max_bound()
    }

    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    /// Max-VaR before the first query followed by one value per answer.
    pub fn max_var_trace(&self) -> Vec<f64> {
        std::iter::once(self.initial_max_var)
            .chain(self.history.iter().map(|h| h.max_var))
            .collect()
    }
}

/// A chosen query with the score that selected it.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub query: Query,
    pub score: f64,
    /// Every candidate's VaR bound fell back to the sample maximum.
    pub insufficient: bool,
}

/// MDP, features and settings shared by every step of one learning run.
#[derive(Debug, Clone, Copy)]
pub struct Learner<'a> {
    pub mdp: &'a TabularMdp,
    pub features: &'a Arc<Array2<f64>>,
    pub config: &'a ActiveConfig,
}

/// Answers queries: a synthetic oracle, or a human behind the session service.
pub trait Demonstrator {
    fn answer(&mut self, query: &Query) -> Result<QueryAnswer>;
}

impl Demonstrator for Oracle {
    fn answer(&mut self, query: &Query) -> Result<QueryAnswer> {
        match query {
            Query::Action { state } => Ok(QueryAnswer::Action {
                action: self.action(*state),
            }),
            Query::Critique { trajectory, .. } => Ok(QueryAnswer::Critique {
                segments: self.critique(trajectory)?,
            }),
            Query::Placement { .. } => Err(Error::Demonstrator("gridworld oracle cannot answer placement queries".into())),
        }
    }
}

/// Why a loop run ended.
#[derive(Debug)]
pub struct LoopRun {
    pub state: LoopState,
    /// Set when the demonstrator or sampler failed; `state` holds every
    /// iteration completed before the failure.
    pub aborted: Option<Error>,
}

/// Per-iteration timings reported to loop observers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IterationTiming {
    pub select: Duration,
    pub update: Duration,
}

impl<'a> Learner<'a> {
    pub fn new(mdp: &'a TabularMdp, features: &'a Arc<Array2<f64>>, config: &'a ActiveConfig) -> Self {
        Self { mdp, features, config }
    }

    pub fn candidates(&self) -> Vec<usize> {
        self.config
            .candidates
            .clone()
            .unwrap_or_else(|| {
                let d = self.mdp.start_dist();
                (0..self.mdp.num_states()).filter(|&s| d[s] > 0.0).collect()
            })
    }

    fn chain_config(&self, iteration: usize, warm: bool) -> ChainConfig {
        let mut cfg = self.config.chain.clone();
        cfg.rng_seed = derive_seed(self.config.chain.rng_seed, iteration as u64);
        if warm {
            cfg.burn_in /= 2;
        }
        cfg
    }

    fn posterior_state(
        &self,
        demos: DemonstrationSet,
        posterior: PosteriorSamples,
        history: Vec<HistoryEntry>,
        initial_max_var: Option<f64>,
        epsilon: f64,
    ) -> Result<LoopState> {
        let map = posterior.map_index()?;
        let map_weights = posterior.sample(map).to_owned();
        let solutions = posterior
            .solutions()
            .ok_or_else(|| Error::InternalConsistency("tabular posterior without solutions".into()))?;
        let eval_policy = greedy_policy(&solutions[map].q);
        let report = self.var_report(&posterior, &eval_policy)?;
        let max_var = report.max_bound();
        Ok(LoopState {
            demos,
            posterior,
            map_weights,
            eval_policy,
            initial_max_var: initial_max_var.unwrap_or(max_var),
            history,
            epsilon,
            stopped: max_var < epsilon,
            report,
        })
    }

    fn var_report(&self, posterior: &PosteriorSamples, policy: &Policy) -> Result<VarReport> {
        per_state_var(
            self.mdp,
            posterior,
            self.features,
            policy,
            self.config.alpha,
            self.config.delta,
            &self.candidates(),
            self.config.loss,
            self.config.chain.solver_tol,
        )
    }

    /// Samples the posterior for `demos` and builds the first loop state.
    pub fn initialize(&self, demos: DemonstrationSet, epsilon: f64) -> Result<LoopState> {
        let posterior = policy_walk_mcmc_from(self.mdp, self.features, &demos, &self.chain_config(0, false), None)?;
        self.initialize_with(demos, posterior, epsilon)
    }

    /// Builds the first loop state from an already-sampled posterior.
    pub fn initialize_with(&self, demos: DemonstrationSet, posterior: PosteriorSamples, epsilon: f64) -> Result<LoopState> {
        if epsilon.is_nan() {
            return Err(Error::invalid("epsilon must not be NaN"));
        }
        self.posterior_state(demos, posterior, Vec::new(), None, epsilon)
    }

    fn with_trajectory(&self, state: &LoopState, chosen: usize, mode: QueryMode) -> Result<Query> {
        Ok(match mode {
            QueryMode::Action => Query::Action { state: chosen },
            QueryMode::Critique => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.config.query_seed ^ 0xC217_1C0E,
                    state.iteration() as u64,
                ));
                let trajectory = rollout(
                    self.mdp,
                    &state.eval_policy,
                    chosen,
                    self.config.critique_len,
                    self.config.rollout,
                    &mut rng,
                )?;
                Query::Critique {
                    state: chosen,
                    trajectory,
                }
            }
        })
    }

    /// State with the largest per-state VaR bound of the current policy.
    pub fn select_var_query(&self, state: &LoopState, mode: QueryMode) -> Result<Selection> {
        if state.posterior.is_empty() {
            return Err(Error::Empty("posterior sample set"));
        }
        let report = self.var_report(&state.posterior, &state.eval_policy)?;
        let (chosen, score) = report.argmax().ok_or(Error::Empty("candidate set"))?;
        Ok(Selection {
            query: self.with_trajectory(state, chosen, mode)?,
            score,
            insufficient: report.all_insufficient(),
        })
    }

    /// State whose posterior-averaged greedy action distribution has maximal entropy.
    pub fn select_entropy_query(&self, state: &LoopState, mode: QueryMode) -> Result<Selection> {
        let candidates = self.candidates();
        let entropies = action_entropies(&state.posterior, &candidates, self.mdp.num_actions())?;
        let mut best = (candidates[0], entropies[0]);
        for (&c, &h) in candidates.iter().zip(&entropies).skip(1) {
            if h > best.1 || (h == best.1 && c < best.0) {
                best = (c, h);
            }
        }
        Ok(Selection {
            query: self.with_trajectory(state, best.0, mode)?,
            score: best.1,
            insufficient: false,
        })
    }

    /// Uniformly random candidate; the draw is seeded per iteration.
    pub fn select_random_query(&self, state: &LoopState, mode: QueryMode) -> Result<Selection> {
        let candidates = self.candidates();
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.query_seed, state.iteration() as u64));
        let chosen = candidates[rng.random_range(0..candidates.len())];
        Ok(Selection {
            query: self.with_trajectory(state, chosen, mode)?,
            score: 0.0,
            insufficient: false,
        })
    }

    pub fn select(&self, strategy: Strategy, state: &LoopState, mode: QueryMode) -> Result<Selection> {
        match strategy {
            Strategy::Activevar => self.select_var_query(state, mode),
            Strategy::Entropy => self.select_entropy_query(state, mode),
            Strategy::Random => self.select_random_query(state, mode),
        }
    }

    /// Adds the answer to the demonstrations, re-samples the posterior and
    /// recomputes the MAP policy and its VaR bounds. `state` is untouched;
    /// a malformed answer leaves nothing changed.
    pub fn incorporate_answer(&self, state: &LoopState, query: &Query, answer: &QueryAnswer) -> Result<LoopState> {
        let mut demos = state.demos.clone();
        match (query, answer) {
            (Query::Action { state: s }, QueryAnswer::Action { action }) => {
                if *action >= self.mdp.num_actions() {
                    return Err(Error::Validation(format!("action {action} out of range")));
                }
                demos.push_positive(*s, *action);
            }
            (Query::Critique { trajectory, .. }, QueryAnswer::Critique { segments }) => {
                validate_segments(segments, trajectory.len())?;
                for seg in segments {
                    for &(s, a) in &trajectory[seg.start..=seg.end] {
                        match seg.label {
                            SegmentLabel::Good => demos.push_positive(s, a),
                            SegmentLabel::Bad => demos.push_negative(s, a),
                        }
                    }
                }
            }
            _ => return Err(Error::Validation("answer kind does not match the query".into())),
        }
        let iteration = state.iteration() + 1;
        let warm = self.config.warm_start;
        let start = warm.then(|| state.map_weights.as_slice().expect("contiguous").to_vec());
        let posterior = policy_walk_mcmc_from(
            self.mdp,
            self.features,
            &demos,
            &self.chain_config(iteration, warm),
            start.as_deref(),
        )?;
        let mut next = self.posterior_state(
            demos,
            posterior,
            state.history.clone(),
            Some(state.initial_max_var),
            state.epsilon,
        )?;
        let max_var = next.max_var();
        next.history.push(HistoryEntry {
            query: query.clone(),
            answer: answer.clone(),
            max_var,
        });
        Ok(next)
    }

    /// Runs select → ask → incorporate until the max-VaR bound falls below
    /// `epsilon` or `max_queries` answers have been incorporated. `observer`
    /// sees the initial state and every subsequent one.
    pub fn run(
        &self,
        initial: LoopState,
        strategy: Strategy,
        mode: QueryMode,
        max_queries: usize,
        demonstrator: &mut dyn Demonstrator,
        observer: &mut dyn FnMut(&LoopState, IterationTiming),
    ) -> LoopRun {
        let mut state = initial;
        observer(&state, IterationTiming::default());
        while !state.stopped && state.iteration() < max_queries {
            let t0 = Instant::now();
            let selection = match self.select(strategy, &state, mode) {
                Ok(s) => s,
                Err(e) => return LoopRun { state, aborted: Some(e) },
            };
            if selection.insufficient {
                log::warn!("posterior too small for the requested VaR confidence; using the sample maximum");
            }
            let select = t0.elapsed();
            let answer = match demonstrator.answer(&selection.query) {
                Ok(a) => a,
                Err(e) => return LoopRun { state, aborted: Some(e) },
            };
            let t1 = Instant::now();
            match self.incorporate_answer(&state, &selection.query, &answer) {
                Ok(next) => state = next,
                Err(e) => return LoopRun { state, aborted: Some(e) },
            }
            observer(&state, IterationTiming { select, update: t1.elapsed() });
        }
        LoopRun { state, aborted: None }
    }
}

/// Shannon entropy (nats) of the posterior-averaged greedy action at each candidate.
pub fn action_entropies(posterior: &PosteriorSamples, candidates: &[usize], num_actions: usize) -> Result<Vec<f64>> {
    if posterior.is_empty() {
        return Err(Error::Empty("posterior sample set"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let solutions = posterior
        .solutions()
        .ok_or_else(|| Error::invalid("entropy queries need solved posterior samples"))?;
    let mut counts = vec![vec![0usize; num_actions]; candidates.len()];
    for sol in solutions {
        for (row, &c) in counts.iter_mut().zip(candidates) {
            row[sol.q.argmax(c)] += 1;
        }
    }
    let n = solutions.len() as f64;
    Ok(counts
        .iter()
        .map(|row| {
            row.iter()
                .filter(|&&k| k > 0)
                .map(|&k| {
                    let p = k as f64 / n;
                    -p * p.ln()
                })
                .sum()
        })
        .collect())
}

/// Convenience wrapper: initialize from `initial_demos` and run the loop.
#[allow(clippy::too_many_arguments)]
pub fn run_active_loop(
    mdp: &TabularMdp,
    features: &Arc<Array2<f64>>,
    config: &ActiveConfig,
    initial_demos: DemonstrationSet,
    strategy: Strategy,
    mode: QueryMode,
    epsilon: f64,
    max_queries: usize,
    demonstrator: &mut dyn Demonstrator,
) -> Result<LoopRun> {
    let learner = Learner::new(mdp, features, config);
    let state = learner.initialize(initial_demos, epsilon)?;
    Ok(learner.run(state, strategy, mode, max_queries, demonstrator, &mut |_, _| {}))
}
