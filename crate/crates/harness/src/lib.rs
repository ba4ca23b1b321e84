//! Experiment runner for risk-aware active IRL: paired strategy trials,
//! metric aggregation and plot-ready output.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod four_colour;
pub mod metrics;
pub mod placement_task;
pub mod stopping;

pub use config::{ExperimentConfig, Task};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, ExperimentOutput};
