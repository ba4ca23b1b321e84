//! Session task specifications as accepted by `POST /sessions`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use riskirl::active::{QueryMode, Strategy};
use riskirl::gridworld::GridSpec;
use riskirl::irl::ChainConfig;
use riskirl::placement::{Bounds, PlacementConfig, Scenario, TableConfig};
use riskirl::risk::{LossKind, DEFAULT_ALPHA, DEFAULT_DELTA};

/// One offending field of a rejected specification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Gridworld(GridTaskSpec),
    Placement(PlacementTaskSpec),
}

/// Which MDP a gridworld session runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum WorldSpec {
    /// Two states, stay or switch.
    ToyChain,
    /// The four-colour map.
    FourColour,
    /// The sparse barrier map.
    Barrier,
    /// Any generated grid.
    Custom { grid: GridSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridTaskSpec {
    pub world: WorldSpec,
    pub query_mode: QueryMode,
    pub strategy: Strategy,
    pub alpha: f64,
    pub delta: f64,
    /// The session stops once the max-VaR bound is below this.
    pub epsilon: f64,
    pub loss: LossKind,
    pub critique_len: usize,
    pub chain: ChainConfig,
    pub seed: u64,
}

impl Default for GridTaskSpec {
    fn default() -> Self {
        Self {
            world: WorldSpec::ToyChain,
            query_mode: QueryMode::Action,
            strategy: Strategy::Activevar,
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            epsilon: 0.05,
            loss: LossKind::Evd,
            critique_len: 8,
            chain: ChainConfig {
                num_samples: 1000,
                burn_in: 200,
                // Humans are noisy demonstrators.
                confidence_c: 10.0,
                ..ChainConfig::default()
            },
            seed: 0,
        }
    }
}

/// Items on the table: a seeded layout with a scenario's item count, or
/// explicit positions on a unit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSpec {
    Scenario(Scenario),
    Items(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementTaskSpec {
    pub table: TableSpec,
    pub strategy: Strategy,
    pub alpha: f64,
    pub delta: f64,
    /// Distance bound (m) below which the session stops.
    pub epsilon: f64,
    pub confidence: f64,
    pub candidates: usize,
    pub chain: ChainConfig,
    pub seed: u64,
}

impl Default for PlacementTaskSpec {
    fn default() -> Self {
        let defaults = PlacementConfig::default();
        Self {
            table: TableSpec::Scenario(Scenario::Vase),
            strategy: Strategy::Activevar,
            alpha: defaults.alpha,
            delta: defaults.delta,
            epsilon: 0.05,
            confidence: defaults.confidence,
            candidates: defaults.candidates,
            chain: defaults.chain,
            seed: 0,
        }
    }
}

impl PlacementTaskSpec {
    /// The configuration whose items get moved to form candidate queries.
    pub fn base_config(&self) -> riskirl::Result<TableConfig> {
        match &self.table {
            TableSpec::Scenario(s) => Ok(TableConfig::random(
                s.num_items(),
                Bounds::unit(),
                &mut ChaCha8Rng::seed_from_u64(self.seed),
            )),
            TableSpec::Items(items) => TableConfig::new(items.clone(), Bounds::unit()),
        }
    }
}

fn check_levels(errors: &mut Vec<FieldError>, alpha: f64, delta: f64, epsilon: f64) {
    if !(alpha > 0.0 && alpha < 1.0) {
        errors.push(FieldError::new("alpha", "must lie in (0, 1)"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        errors.push(FieldError::new("delta", "must lie in (0, 1)"));
    }
    if !(epsilon >= 0.0) {
        errors.push(FieldError::new("epsilon", "must be non-negative"));
    }
}

fn check_chain(errors: &mut Vec<FieldError>, chain: &ChainConfig) {
    if let Err(e) = chain.validate() {
        errors.push(FieldError::new("chain", e.to_string()));
    }
}

impl TaskSpec {
    /// Every problem with the specification, or an empty list.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        match self {
            TaskSpec::Gridworld(g) => {
                check_levels(&mut errors, g.alpha, g.delta, g.epsilon);
                check_chain(&mut errors, &g.chain);
                if let WorldSpec::Custom { grid } = &g.world {
                    if let Err(e) = grid.validate() {
                        errors.push(FieldError::new("world.grid", e.to_string()));
                    }
                }
                if g.query_mode == QueryMode::Critique && g.critique_len == 0 {
                    errors.push(FieldError::new("critique_len", "must be at least 1"));
                }
            }
            TaskSpec::Placement(p) => {
                check_levels(&mut errors, p.alpha, p.delta, p.epsilon);
                check_chain(&mut errors, &p.chain);
                if p.strategy == Strategy::Entropy {
                    errors.push(FieldError::new("strategy", "entropy is not defined for placement"));
                }
                if p.candidates == 0 {
                    errors.push(FieldError::new("candidates", "must be at least 1"));
                }
                if !(p.confidence >= 0.0) {
                    errors.push(FieldError::new("confidence", "must be non-negative"));
                }
                if let Err(e) = p.base_config() {
                    errors.push(FieldError::new("table", e.to_string()));
                }
            }
        }
        errors
    }
}
