//! Risk-aware active inverse reinforcement learning.
//!
//! Rewards are learned from demonstrations by Metropolis-Hastings sampling
//! over linear reward weights ([`irl`]). Each posterior sample induces a
//! policy loss for the learner's current policy; high-confidence α-VaR upper
//! bounds on those losses ([`risk`]) drive query selection and stopping in
//! the active-learning loop ([`active`]). [`gridworld`] provides the benchmark
//! domains and synthetic demonstrators, [`placement`] the continuous
//! table-placement task.

pub mod active;
pub mod error;
pub mod gridworld;
pub mod irl;
pub mod mdp;
pub mod placement;
pub mod risk;

pub use error::{Error, Result};
