//! Experiment configuration, loaded from TOML and overridable from the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use riskirl::active::{QueryMode, Strategy};
use riskirl::gridworld::{GridSpec, RolloutMode};
use riskirl::irl::ChainConfig;
use riskirl::risk::LossKind;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GridworldAction,
    GridworldCritique,
    Barrier,
    PlacementVase,
    PlacementSpoon,
}

impl Task {
    pub fn is_placement(self) -> bool {
        matches!(self, Task::PlacementVase | Task::PlacementSpoon)
    }

    pub fn query_mode(self) -> QueryMode {
        match self {
            Task::GridworldCritique => QueryMode::Critique,
            _ => QueryMode::Action,
        }
    }

    pub fn default_grid(self) -> GridSpec {
        match self {
            Task::Barrier => GridSpec::barrier(),
            _ => GridSpec::default(),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HarnessError::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategies: Vec<Strategy>,
    pub num_trials: usize,
    pub queries_per_trial: usize,
    pub alpha: f64,
    pub delta: f64,
    /// Stop a run once max-VaR falls below this; 0 runs every query.
    pub epsilon: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Rationality of the synthetic demonstrator.
    pub oracle_c: f64,
    /// Demonstrated pairs (gridworld) or placements given before the first query.
    pub initial_demos: usize,
    pub loss: LossKind,
    pub critique_len: usize,
    pub rollout: RolloutMode,
    pub warm_start: bool,
    pub chain: ChainConfig,
    /// Gridworld spec; the task default when absent.
    pub grid: Option<GridSpec>,
    pub placement: PlacementSettings,
}

/// Placement-task knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSettings {
    /// Candidate configurations scored per query.
    pub candidates: usize,
    /// Held-out configurations for placement error.
    pub test_configs: usize,
    /// Boltzmann confidence of the placement likelihood.
    pub confidence: f64,
    /// Posterior chain for placement tasks (the top-level `chain` drives gridworlds).
    pub chain: ChainConfig,
}

impl Default for PlacementSettings {
    fn default() -> Self {
        Self {
            candidates: 50,
            test_configs: 200,
            confidence: riskirl::placement::PlacementConfig::default().confidence,
            chain: riskirl::placement::PlacementConfig::default().chain,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::GridworldAction,
            strategies: Strategy::ALL.to_vec(),
            num_trials: 10,
            queries_per_trial: 10,
            alpha: 0.95,
            delta: 0.05,
            epsilon: 0.0,
            seed: 0,
            output_dir: PathBuf::from("results"),
            oracle_c: 100.0,
            initial_demos: 1,
            loss: LossKind::Evd,
            critique_len: 8,
            rollout: RolloutMode::MostLikely,
            warm_start: true,
            chain: ChainConfig::default(),
            grid: None,
            placement: PlacementSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `task`; placement tasks compare VaR against random only.
    pub fn for_task(task: Task) -> Self {
        let strategies = if task.is_placement() {
            vec![Strategy::Activevar, Strategy::Random]
        } else {
            Strategy::ALL.to_vec()
        };
        Self {
            task,
            strategies,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_else(|| self.task.default_grid())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_trials == 0 {
            problems.push("num_trials must be at least 1".to_string());
        }
        if self.strategies.is_empty() {
            problems.push("strategies must not be empty".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            problems.push(format!("delta {} must lie in (0, 1)", self.delta));
        }
        if self.epsilon.is_nan() {
            problems.push("epsilon must be a number".to_string());
        }
        if self.oracle_c.is_nan() || self.oracle_c < 0.0 {
            problems.push("oracle_c must be non-negative".to_string());
        }
        if let Err(e) = self.chain.validate() {
            problems.push(format!("chain: {e}"));
        }
        if !self.task.is_placement() {
            if let Err(e) = self.grid_spec().validate() {
                problems.push(format!("grid: {e}"));
            }
        }
        if self.task.is_placement() {
            if self.placement.candidates == 0 {
                problems.push("placement.candidates must be at least 1".to_string());
            }
            if self.placement.test_configs == 0 {
                problems.push("placement.test_configs must be at least 1".to_string());
            }
            if self.placement.confidence.is_nan() || self.placement.confidence < 0.0 {
                problems.push("placement.confidence must be non-negative".to_string());
            }
            if let Err(e) = self.placement.chain.validate() {
                problems.push(format!("placement.chain: {e}"));
            }
            if self.strategies.contains(&Strategy::Entropy) {
                problems.push("entropy selection is not defined for placement tasks".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(problems.join("; ")))
        }
    }
}
