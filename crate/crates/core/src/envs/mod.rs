//! Bundled test environments with exact oracles: a tabular gridworld with
//! value iteration, the classic cart-pole balancing task, a continuous
//! point-mass task, and a small chain MDP fixture for evaluating the
//! counterfactual estimators against dynamic-programming ground truth.

mod cartpole;
mod chain;
mod gridworld;
mod logged;
mod pointmass;

pub use cartpole::{CartPole, CartPoleState};
pub use chain::{ChainEpisode, ChainMdp};
pub use gridworld::{Gridworld, ValueIteration, GRID_ACTIONS};
pub use logged::{generate_logged_data, generate_pointmass_controller_data, generate_pointmass_data, gridworld_policy_propensities, DiscreteSimEnv, LoggedPolicy};
pub use pointmass::{PointMass, PointMassState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid action {action} for environment {env}")]
    InvalidAction { env: String, action: String },
    #[error("policy {policy} is not available for environment {env}")]
    UnsupportedPolicy { env: String, policy: String },
}
