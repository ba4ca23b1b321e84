//! Session engine: the ask/answer loop for one demonstrator, independent of HTTP.
//!
//! Every mutation bumps `revision`. The engine is deterministic given its
//! spec and answers, so a persisted session is restored by replaying them.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use riskirl::active::{ActiveConfig, Learner, LoopState, Query, QueryAnswer, Strategy};
use riskirl::gridworld::{build_gridworld, toy_chain, GridSpec, ACTION_NAMES};
use riskirl::irl::DemonstrationSet;
use riskirl::mdp::TabularMdp;
use riskirl::placement::{
    select_config_query, Bounds, ConfigQuery, PlacementConfig, PlacementDemo, PlacementLearner, PlacementState, Point,
    TableConfig,
};
use riskirl::Error;

use crate::spec::{FieldError, GridTaskSpec, PlacementTaskSpec, TaskSpec, WorldSpec};

/// What the demonstrator is shown about the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldView {
    /// A finite MDP without grid geometry.
    Chain { num_states: usize, num_actions: usize },
    Grid {
        width: usize,
        height: usize,
        num_features: usize,
        /// Indicator feature of each cell, row-major, when features are one-hot.
        cells: Option<Vec<usize>>,
        initial_states: Vec<usize>,
        action_names: Vec<String>,
    },
    Table { bounds: Bounds, items: Vec<Point> },
}

/// A query awaiting an answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PendingQuery {
    State { query: Query },
    Placement { configuration: usize, table: TableConfig },
}

/// Per-candidate bounds scaled to `[0, 1]`; `null` marks non-candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub values: Vec<Option<f64>>,
    pub raw: Vec<Option<f64>>,
    pub max_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub query: PendingQuery,
    pub answer: QueryAnswer,
    pub max_var: f64,
}

/// Read-only snapshot served by `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub task: String,
    pub revision: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub world: WorldView,
    pub history: Vec<HistoryItem>,
    pub pending: Option<PendingQuery>,
    pub iteration: usize,
    pub max_var: f64,
    pub epsilon: f64,
    pub stopped: bool,
    pub heatmap: Heatmap,
    /// Greedy MAP action per state (gridworld sessions).
    pub map_policy: Option<Vec<usize>>,
    /// Where the MAP reward places the item on the base table (placement sessions).
    pub map_placement: Option<Point>,
    pub spec: TaskSpec,
}

/// Response of `GET /sessions/{id}/query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub revision: u64,
    pub stopped: bool,
    pub query: Option<PendingQuery>,
    pub heatmap: Heatmap,
    pub max_var: f64,
    pub epsilon: f64,
    pub iteration: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("invalid task specification")]
    Spec(Vec<FieldError>),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type SessionResult<T> = Result<T, SessionError>;

struct GridEngine {
    spec: GridTaskSpec,
    mdp: TabularMdp,
    features: Arc<Array2<f64>>,
    config: ActiveConfig,
    world: WorldView,
    state: LoopState,
    history: Vec<HistoryItem>,
}

impl GridEngine {
    fn new(spec: &GridTaskSpec) -> SessionResult<Self> {
        let (mdp, features, world) = match &spec.world {
            WorldSpec::ToyChain => {
                let (mdp, features) = toy_chain(0.9)?;
                let world = WorldView::Chain {
                    num_states: mdp.num_states(),
                    num_actions: mdp.num_actions(),
                };
                (mdp, features, world)
            }
            other => {
                let grid = match other {
                    WorldSpec::FourColour => GridSpec::four_colour(),
                    WorldSpec::Barrier => GridSpec::barrier(),
                    WorldSpec::Custom { grid } => grid.clone(),
                    WorldSpec::ToyChain => unreachable!("handled above"),
                };
                let g = build_gridworld(&grid)?;
                let world = WorldView::Grid {
                    width: g.width(),
                    height: g.height(),
                    num_features: g.features.ncols(),
                    cells: g.cell_features.clone(),
                    initial_states: (0..g.mdp.num_states()).filter(|&s| g.mdp.start_dist()[s] > 0.0).collect(),
                    action_names: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
                };
                (g.mdp, g.features, world)
            }
        };
        let mut chain = spec.chain.clone();
        chain.rng_seed = spec.seed;
        let config = ActiveConfig {
            alpha: spec.alpha,
            delta: spec.delta,
            chain,
            critique_len: spec.critique_len,
            loss: spec.loss,
            query_seed: spec.seed,
            ..ActiveConfig::default()
        };
        let state = Learner::new(&mdp, &features, &config).initialize(DemonstrationSet::new(), spec.epsilon)?;
        Ok(Self {
            spec: spec.clone(),
            mdp,
            features,
            config,
            world,
            state,
            history: Vec::new(),
        })
    }

    fn learner(&self) -> Learner<'_> {
        Learner::new(&self.mdp, &self.features, &self.config)
    }

    fn select(&self) -> SessionResult<PendingQuery> {
        let selection = self.learner().select(self.spec.strategy, &self.state, self.spec.query_mode)?;
        Ok(PendingQuery::State { query: selection.query })
    }

    fn answer(&mut self, pending: &PendingQuery, answer: &QueryAnswer) -> SessionResult<()> {
        let PendingQuery::State { query } = pending else {
            return Err(SessionError::Invalid("gridworld sessions only ask state queries".into()));
        };
        let next = self.learner().incorporate_answer(&self.state, query, answer)?;
        self.history.push(HistoryItem {
            query: pending.clone(),
            answer: answer.clone(),
            max_var: next.max_var(),
        });
        self.state = next;
        Ok(())
    }

    fn heatmap(&self) -> Heatmap {
        let n = self.mdp.num_states();
        let normalized = self.state.report.normalized();
        Heatmap {
            values: (0..n).map(|s| normalized.get(&s).copied()).collect(),
            raw: (0..n).map(|s| self.state.report.per_candidate.get(&s).copied()).collect(),
            max_var: self.state.max_var(),
        }
    }
}

struct PlacementEngine {
    spec: PlacementTaskSpec,
    config: PlacementConfig,
    base: TableConfig,
    state: PlacementState,
    /// Candidates and their bounds for the next query.
    candidates: Vec<TableConfig>,
    bounds: Vec<f64>,
    choice: ConfigQuery,
    history: Vec<HistoryItem>,
}

impl PlacementEngine {
    fn new(spec: &PlacementTaskSpec) -> SessionResult<Self> {
        let base = spec.base_config()?;
        let mut chain = spec.chain.clone();
        chain.rng_seed = spec.seed;
        let config = PlacementConfig {
            alpha: spec.alpha,
            delta: spec.delta,
            confidence: spec.confidence,
            chain,
            candidates: spec.candidates,
            warm_start: true,
            seed: spec.seed,
        };
        let state = PlacementLearner::new(&config).prior(base.item_positions.len())?;
        let (candidates, bounds, choice) = Self::score(&config, spec.strategy, &base, &state)?;
        Ok(Self {
            spec: spec.clone(),
            config,
            base,
            state,
            candidates,
            bounds,
            choice,
            history: Vec::new(),
        })
    }

    /// Bounds of every candidate for the next query and the strategy's pick.
    fn score(
        config: &PlacementConfig,
        strategy: Strategy,
        base: &TableConfig,
        state: &PlacementState,
    ) -> SessionResult<(Vec<TableConfig>, Vec<f64>, ConfigQuery)> {
        let learner = PlacementLearner::new(config);
        let iteration = state.demos.len();
        let candidates = learner.candidates(base, iteration);
        let (index, vars) = select_config_query(&candidates, &state.posterior, &state.map_weights, config.alpha, config.delta)?;
        let bounds = vars.iter().map(|v| v.bound).collect();
        let choice = match strategy {
            // Reuse the bounds already computed for the heatmap.
            Strategy::Activevar => ConfigQuery {
                config: candidates[index].clone(),
                index,
                max_bound: Some(vars[index].bound),
                var: vars[index].clone(),
            },
            other => learner.select(state, &candidates, other, iteration)?,
        };
        Ok((candidates, bounds, choice))
    }

    fn max_var(&self) -> f64 {
        self.bounds.iter().copied().fold(0.0, f64::max)
    }

    fn select(&self) -> PendingQuery {
        PendingQuery::Placement {
            configuration: self.choice.index,
            table: self.choice.config.clone(),
        }
    }

    fn answer(&mut self, pending: &PendingQuery, answer: &QueryAnswer) -> SessionResult<()> {
        let (PendingQuery::Placement { table, .. }, QueryAnswer::Placement { x, y }) = (pending, answer) else {
            return Err(SessionError::Invalid("placement sessions take placement answers".into()));
        };
        let demo = PlacementDemo::new(table.clone(), [*x, *y]).map_err(|e| SessionError::Invalid(e.to_string()))?;
        let learner = PlacementLearner::new(&self.config);
        let state = learner.incorporate(&self.state, demo)?;
        let (candidates, bounds, choice) = Self::score(&self.config, self.spec.strategy, &self.base, &state)?;
        self.state = state;
        self.candidates = candidates;
        self.bounds = bounds;
        self.choice = choice;
        let max_var = self.max_var();
        self.history.push(HistoryItem {
            query: pending.clone(),
            answer: answer.clone(),
            max_var,
        });
        Ok(())
    }

    fn heatmap(&self) -> Heatmap {
        let max = self.max_var();
        Heatmap {
            values: self
                .bounds
                .iter()
                .map(|&b| Some(if max > 0.0 { (b / max).clamp(0.0, 1.0) } else { 0.0 }))
                .collect(),
            raw: self.bounds.iter().map(|&b| Some(b)).collect(),
            max_var: max,
        }
    }

    fn map_placement(&self) -> SessionResult<Point> {
        Ok(riskirl::placement::optimal_placement(&self.base, &self.state.map_weights)?.point)
    }
}

enum Engine {
    Grid(Box<GridEngine>),
    Placement(Box<PlacementEngine>),
}

/// One demonstrator session.
pub struct Session {
    id: String,
    spec: TaskSpec,
    engine: Engine,
    pending: Option<PendingQuery>,
    revision: u64,
    created_ms: u64,
    updated_ms: u64,
}

/// Everything needed to rebuild a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedSession {
    pub id: String,
    pub spec: TaskSpec,
    pub answers: Vec<(PendingQuery, QueryAnswer)>,
    pub pending: Option<PendingQuery>,
    pub revision: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Session {
    pub fn new(id: String, spec: TaskSpec) -> SessionResult<Self> {
        let problems = spec.validate();
        if !problems.is_empty() {
            return Err(SessionError::Spec(problems));
        }
        let engine = match &spec {
            TaskSpec::Gridworld(g) => Engine::Grid(Box::new(GridEngine::new(g)?)),
            TaskSpec::Placement(p) => Engine::Placement(Box::new(PlacementEngine::new(p)?)),
        };
        let now = now_ms();
        Ok(Self {
            id,
            spec,
            engine,
            pending: None,
            revision: 0,
            created_ms: now,
            updated_ms: now,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn pending(&self) -> Option<&PendingQuery> {
        self.pending.as_ref()
    }

    fn epsilon(&self) -> f64 {
        match &self.spec {
            TaskSpec::Gridworld(g) => g.epsilon,
            TaskSpec::Placement(p) => p.epsilon,
        }
    }

    pub fn max_var(&self) -> f64 {
        match &self.engine {
            Engine::Grid(g) => g.state.max_var(),
            Engine::Placement(p) => p.max_var(),
        }
    }

    pub fn iteration(&self) -> usize {
        match &self.engine {
            Engine::Grid(g) => g.history.len(),
            Engine::Placement(p) => p.history.len(),
        }
    }

    pub fn stopped(&self) -> bool {
        self.max_var() < self.epsilon()
    }

    pub fn heatmap(&self) -> Heatmap {
        match &self.engine {
            Engine::Grid(g) => g.heatmap(),
            Engine::Placement(p) => p.heatmap(),
        }
    }

    fn touch(&mut self) {
        self.revision += 1;
        self.updated_ms = now_ms().max(self.updated_ms);
    }

    /// Issues the next query, or reports that the session has stopped.
    pub fn next_query(&mut self) -> SessionResult<QueryView> {
        if self.pending.is_some() {
            return Err(SessionError::Conflict("a query is already awaiting its answer".into()));
        }
        let query = if self.stopped() {
            None
        } else {
            let q = match &self.engine {
                Engine::Grid(g) => g.select()?,
                Engine::Placement(p) => p.select(),
            };
            self.pending = Some(q.clone());
            self.touch();
            Some(q)
        };
        Ok(QueryView {
            revision: self.revision,
            stopped: query.is_none(),
            query,
            heatmap: self.heatmap(),
            max_var: self.max_var(),
            epsilon: self.epsilon(),
            iteration: self.iteration(),
        })
    }

    /// Checks that an answer can be submitted without running the update.
    pub fn check_answer(&self, answer: &QueryAnswer, revision: Option<u64>) -> SessionResult<()> {
        let pending = self
            .pending
            .as_ref()
            .ok_or_else(|| SessionError::Conflict("no query is awaiting an answer".into()))?;
        if let Some(r) = revision {
            if r != self.revision {
                return Err(SessionError::Conflict(format!(
                    "answer targets revision {r} but the session is at {}",
                    self.revision
                )));
            }
        }
        let matches = matches!(
            (pending, answer),
            (PendingQuery::State { query: Query::Action { .. } }, QueryAnswer::Action { .. })
                | (PendingQuery::State { query: Query::Critique { .. } }, QueryAnswer::Critique { .. })
                | (PendingQuery::Placement { .. }, QueryAnswer::Placement { .. })
        );
        if !matches {
            return Err(SessionError::Invalid("answer kind does not match the pending query".into()));
        }
        Ok(())
    }

    /// Folds the answer in and re-samples the posterior. On error the
    /// session is left exactly as it was.
    pub fn submit_answer(&mut self, answer: &QueryAnswer, revision: Option<u64>) -> SessionResult<()> {
        self.check_answer(answer, revision)?;
        let pending = self.pending.clone().expect("checked above");
        self.apply(&pending, answer)?;
        self.pending = None;
        self.touch();
        Ok(())
    }

    fn apply(&mut self, pending: &PendingQuery, answer: &QueryAnswer) -> SessionResult<()> {
        match &mut self.engine {
            Engine::Grid(g) => g.answer(pending, answer).map_err(validation_as_invalid),
            Engine::Placement(p) => p.answer(pending, answer),
        }
    }

    pub fn view(&self) -> SessionResult<SessionView> {
        let (task, world, history, map_policy, map_placement) = match &self.engine {
            Engine::Grid(g) => (
                "gridworld",
                g.world.clone(),
                g.history.clone(),
                Some(g.state.eval_policy.actions()),
                None,
            ),
            Engine::Placement(p) => (
                "placement",
                WorldView::Table {
                    bounds: p.base.table_bounds,
                    items: p.base.item_positions.clone(),
                },
                p.history.clone(),
                None,
                Some(p.map_placement()?),
            ),
        };
        Ok(SessionView {
            id: self.id.clone(),
            task: task.to_string(),
            revision: self.revision,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            world,
            history,
            pending: self.pending.clone(),
            iteration: self.iteration(),
            max_var: self.max_var(),
            epsilon: self.epsilon(),
            stopped: self.stopped(),
            heatmap: self.heatmap(),
            map_policy,
            map_placement,
            spec: self.spec.clone(),
        })
    }

    pub fn to_persisted(&self) -> PersistedSession {
        let history = match &self.engine {
            Engine::Grid(g) => &g.history,
            Engine::Placement(p) => &p.history,
        };
        PersistedSession {
            id: self.id.clone(),
            spec: self.spec.clone(),
            answers: history.iter().map(|h| (h.query.clone(), h.answer.clone())).collect(),
            pending: self.pending.clone(),
            revision: self.revision,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
        }
    }

    /// Rebuilds a session by replaying its answers.
    pub fn restore(saved: PersistedSession) -> SessionResult<Self> {
        let mut session = Self::new(saved.id, saved.spec)?;
        for (query, answer) in &saved.answers {
            session.apply(query, answer)?;
        }
        session.pending = saved.pending;
        session.revision = saved.revision;
        session.created_ms = saved.created_ms;
        session.updated_ms = saved.updated_ms;
        Ok(session)
    }
}

fn validation_as_invalid(e: SessionError) -> SessionError {
    match e {
        SessionError::Core(Error::Validation(msg)) => SessionError::Invalid(msg),
        other => other,
    }
}
