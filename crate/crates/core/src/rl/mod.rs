//! Update rules and serving-time policies: discrete DQN (double, dueling,
//! multi-step), parametric-action DQN, DDPG and SAC for continuous actions,
//! action-selection with full propensity logging, the send/drop threshold
//! policy, and its PID threshold controller.

mod ddpg;
mod dqn;
mod parametric;
mod pid;
mod policy;
mod sac;

pub use ddpg::{ddpg_step, ContinuousBatch, Ddpg, DdpgConfig, DdpgLosses};
pub use dqn::{dqn_train_step, dueling_combine, td_target, DqnBatch, QHead, QNetwork};
pub use parametric::{parametric_q, parametric_train_step, ParametricBatch};
pub use pid::PidController;
pub use policy::{policy_propensities, select_action, threshold_policy, PolicyDecision, PolicyMode};
pub use sac::{sac_step, squashed_gaussian_log_density, Sac, SacConfig, SacLosses};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("transition for mdp_id {0} has no possible_next_actions; Q-learning targets need them (use SARSA mode or fix the data)")]
    MissingPossibleNextActions(String),
    #[error("no candidate actions supplied")]
    NoCandidates,
    #[error("training step produced a non-finite loss{0}")]
    NonFiniteLoss(String),
    #[error("{0}")]
    Shape(#[from] crate::neural::NeuralError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Target-network refresh schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdate {
    /// Copy the online network every `every` optimizer steps.
    Hard { every: u64 },
    /// Exponential blend after every step: target <- tau*online + (1-tau)*target.
    Polyak { tau: f64 },
}

/// Regression loss for TD errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Huber { delta: f64 },
}

impl LossKind {
    /// (loss value, dloss/derror) for one residual.
    pub(crate) fn value_and_grad(&self, error: f64) -> (f64, f64) {
        match self {
            LossKind::Mse => (error * error, 2.0 * error),
            LossKind::Huber { delta } => {
                if error.abs() <= *delta {
                    (0.5 * error * error, error)
                } else {
                    (delta * (error.abs() - 0.5 * delta), delta * error.signum())
                }
            }
        }
    }
}

/// Discrete-DQN options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DqnConfig {
    pub gamma: f64,
    pub double_q: bool,
    pub dueling: bool,
    /// n-step returns; 1 recovers the ordinary one-step target.
    pub multi_step: usize,
    pub target_update: TargetUpdate,
    pub loss: LossKind,
    /// SARSA targets (bootstrap on the logged next action) instead of the max.
    pub sarsa: bool,
    /// Discount by gamma^time_diff instead of gamma per transition, for
    /// sub-sampled MDPs.
    pub use_time_diff_discount: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            gamma: 0.9,
            double_q: true,
            dueling: false,
            multi_step: 1,
            target_update: TargetUpdate::Hard { every: 100 },
            loss: LossKind::Mse,
            sarsa: false,
            use_time_diff_discount: false,
        }
    }
}

/// Polyak blend of a target parameter vector toward the online one.
pub fn polyak_update(target: &mut crate::neural::ParamVector, online: &crate::neural::ParamVector, tau: f64) {
    for (t, o) in target.data.iter_mut().zip(&online.data) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}
