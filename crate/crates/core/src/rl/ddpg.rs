//! Deep deterministic policy gradients for continuous actions. The actor
//! emits a tanh-bounded action in [-1, 1]^d; the critic scores concatenated
//! state-action vectors; both keep Polyak-averaged target copies.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::neural::{adam_step, mlp_backward, mlp_forward, AdamState, Activation, MlpSpec, ParamVector};

use super::{polyak_update, RlError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
        }
    }
}

/// Actor-critic parameter bundle with target copies and optimizers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ddpg {
    pub actor_spec: MlpSpec,
    pub actor: ParamVector,
    pub actor_target: ParamVector,
    pub critic_spec: MlpSpec,
    pub critic: ParamVector,
    pub critic_target: ParamVector,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub action_dim: usize,
}

impl Ddpg {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        cfg: &DdpgConfig,
        seed: u64,
    ) -> Self {
        Self::new_with(state_dim, action_dim, hidden, Activation::Relu, cfg, seed)
    }

    pub fn new_with(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        cfg: &DdpgConfig,
        seed: u64,
    ) -> Self {
        let mut actor_widths = vec![state_dim];
        actor_widths.extend_from_slice(hidden);
        actor_widths.push(action_dim);
        let actor_spec = MlpSpec::new(actor_widths, activation, seed);
        let mut critic_widths = vec![state_dim + action_dim];
        critic_widths.extend_from_slice(hidden);
        critic_widths.push(1);
        let critic_spec = MlpSpec::new(critic_widths, activation, seed.wrapping_add(1));
        let actor = actor_spec.init_params();
        let critic = critic_spec.init_params();
        Ddpg {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_opt: AdamState::new(cfg.actor_lr, actor.len()),
            critic_opt: AdamState::new(cfg.critic_lr, critic.len()),
            actor_spec,
            actor,
            critic_spec,
            critic,
            action_dim,
        }
    }

    /// Deterministic tanh-bounded action for a batch of states.
    pub fn act(&self, states: &Array2<f64>) -> Result<Array2<f64>, RlError> {
        let fwd = mlp_forward(&self.actor_spec, &self.actor, states)?;
        Ok(fwd.output().mapv(f64::tanh))
    }

    fn act_target(&self, states: &Array2<f64>) -> Result<Array2<f64>, RlError> {
        let fwd = mlp_forward(&self.actor_spec, &self.actor_target, states)?;
        Ok(fwd.output().mapv(f64::tanh))
    }
}

/// A continuous-action minibatch shared by DDPG and SAC.
#[derive(Debug, Clone)]
pub struct ContinuousBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    /// gamma (or gamma^time_diff) per row; 0 for terminal rows.
    pub discount: Vec<f64>,
}

impl ContinuousBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DdpgLosses {
    pub critic_loss: f64,
    /// Mean Q(s, actor(s)) before the update; the actor ascends this.
    pub actor_objective: f64,
}

pub(crate) fn concat_columns(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(a);
    out.slice_mut(s![.., a.ncols()..]).assign(b);
    out
}

/// One critic + actor update with Polyak target refreshes.
pub fn ddpg_step(
    model: &mut Ddpg,
    batch: &ContinuousBatch,
    cfg: &DdpgConfig,
) -> Result<DdpgLosses, RlError> {
    let n = batch.len();
    assert!(n > 0, "empty batch");
    let state_dim = batch.states.ncols();

    // Critic target: y = r + gamma * Q_target(s', actor_target(s')).
    let next_actions = model.act_target(&batch.next_states)?;
    let next_input = concat_columns(&batch.next_states, &next_actions);
    let q_next = mlp_forward(&model.critic_spec, &model.critic_target, &next_input)?;
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        targets.push(batch.rewards[i] + batch.discount[i] * q_next.output()[[i, 0]]);
    }

    // Critic regression.
    let critic_input = concat_columns(&batch.states, &batch.actions);
    let critic_fwd = mlp_forward(&model.critic_spec, &model.critic, &critic_input)?;
    let mut upstream = Array2::zeros((n, 1));
    let mut critic_loss = 0.0;
    for i in 0..n {
        let error = critic_fwd.output()[[i, 0]] - targets[i];
        critic_loss += error * error;
        upstream[[i, 0]] = 2.0 * error / n as f64;
    }
    critic_loss /= n as f64;
    if !critic_loss.is_finite() {
        return Err(RlError::NonFiniteLoss(String::new()));
    }
    let (critic_grads, _) = mlp_backward(&model.critic_spec, &model.critic, &critic_fwd, &upstream)?;
    adam_step(&mut model.critic, &critic_grads, &mut model.critic_opt);

    // Actor ascends Q(s, actor(s)) through the (updated) critic.
    let actor_fwd = mlp_forward(&model.actor_spec, &model.actor, &batch.states)?;
    let actions = actor_fwd.output().mapv(f64::tanh);
    let q_input = concat_columns(&batch.states, &actions);
    let q_fwd = mlp_forward(&model.critic_spec, &model.critic, &q_input)?;
    let actor_objective = q_fwd.output().column(0).mean().unwrap();

    // dQ/d(input) -> slice out the action columns, chain through tanh.
    let ones = Array2::from_elem((n, 1), 1.0 / n as f64);
    let (_, q_input_grad) = mlp_backward(&model.critic_spec, &model.critic, &q_fwd, &ones)?;
    let dq_daction = q_input_grad.slice(s![.., state_dim..]);
    // minimize -Q: upstream on raw (pre-tanh) actor output
    let mut actor_upstream = Array2::zeros(actions.dim());
    for i in 0..n {
        for d in 0..model.action_dim {
            let a = actions[[i, d]];
            actor_upstream[[i, d]] = -dq_daction[[i, d]] * (1.0 - a * a);
        }
    }
    let (actor_grads, _) =
        mlp_backward(&model.actor_spec, &model.actor, &actor_fwd, &actor_upstream)?;
    adam_step(&mut model.actor, &actor_grads, &mut model.actor_opt);

    polyak_update(&mut model.critic_target, &model.critic, cfg.tau);
    polyak_update(&mut model.actor_target, &model.actor, cfg.tau);

    Ok(DdpgLosses {
        critic_loss,
        actor_objective,
    })
}
