//! Soft actor-critic with a fixed temperature: twin critics with Polyak
//! targets and a tanh-squashed Gaussian actor trained by reparameterization.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::neural::{adam_step, mlp_backward, mlp_forward, AdamState, Activation, MlpSpec, ParamVector};

use super::ddpg::{concat_columns, ContinuousBatch};
use super::{polyak_update, RlError};

const ACTOR_LOG_STD_MIN: f64 = -5.0;
const ACTOR_LOG_STD_MAX: f64 = 2.0;
const TANH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Fixed entropy temperature.
    pub alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.2,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
        }
    }
}

/// Twin-critic SAC bundle. The actor outputs `[mean | log_std]` per action
/// dimension; actions are tanh(mean + std * noise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sac {
    pub actor_spec: MlpSpec,
    pub actor: ParamVector,
    pub critic_spec: MlpSpec,
    pub critic1: ParamVector,
    pub critic2: ParamVector,
    pub critic1_target: ParamVector,
    pub critic2_target: ParamVector,
    pub actor_opt: AdamState,
    pub critic1_opt: AdamState,
    pub critic2_opt: AdamState,
    pub action_dim: usize,
    pub rng_seed: u64,
    pub rng_calls: u64,
}

impl Sac {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        cfg: &SacConfig,
        seed: u64,
    ) -> Self {
        Self::new_with(state_dim, action_dim, hidden, Activation::Relu, cfg, seed)
    }

    pub fn new_with(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        cfg: &SacConfig,
        seed: u64,
    ) -> Self {
        let mut actor_widths = vec![state_dim];
        actor_widths.extend_from_slice(hidden);
        actor_widths.push(2 * action_dim);
        let actor_spec = MlpSpec::new(actor_widths, activation, seed);
        let mut critic_widths = vec![state_dim + action_dim];
        critic_widths.extend_from_slice(hidden);
        critic_widths.push(1);
        let critic_spec = MlpSpec::new(critic_widths, activation, seed.wrapping_add(1));
        let critic1 = critic_spec.init_params();
        let critic2 = {
            let mut alt = critic_spec.clone();
            alt.seed = seed.wrapping_add(2);
            alt.init_params()
        };
        let actor = actor_spec.init_params();
        Sac {
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor_opt: AdamState::new(cfg.actor_lr, actor.len()),
            critic1_opt: AdamState::new(cfg.critic_lr, critic1.len()),
            critic2_opt: AdamState::new(cfg.critic_lr, critic2.len()),
            actor_spec,
            actor,
            critic_spec,
            critic1,
            critic2,
            action_dim,
            rng_seed: seed,
            rng_calls: 0,
        }
    }

    /// Deterministic action (tanh of the mean), for serving and evaluation.
    pub fn act_mean(&self, states: &Array2<f64>) -> Result<Array2<f64>, RlError> {
        let fwd = mlp_forward(&self.actor_spec, &self.actor, states)?;
        let out = fwd.output();
        let mut actions = Array2::zeros((states.nrows(), self.action_dim));
        for i in 0..states.nrows() {
            for d in 0..self.action_dim {
                actions[[i, d]] = out[[i, d]].tanh();
            }
        }
        Ok(actions)
    }
}

/// Log-density of a tanh-squashed Gaussian at squash input `u`:
/// log N(u; mean, std) - log(1 - tanh(u)^2 + eps).
pub fn squashed_gaussian_log_density(u: f64, mean: f64, log_std: f64) -> f64 {
    let std = log_std.exp();
    let z = (u - mean) / std;
    let gaussian = -0.5 * LN_2PI - log_std - 0.5 * z * z;
    let t = u.tanh();
    gaussian - (1.0 - t * t + TANH_EPS).ln()
}

#[derive(Debug, Clone, Copy)]
pub struct SacLosses {
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub actor_loss: f64,
}

struct SampledActions {
    /// Pre-squash values mean + std * noise.
    u: Array2<f64>,
    actions: Array2<f64>,
    noise: Array2<f64>,
    log_prob: Vec<f64>,
    log_stds: Array2<f64>,
    /// Raw (unclamped) log-std outputs, to zero gradients at the clamp.
    raw_log_stds: Array2<f64>,
}

fn sample_actions(
    spec: &MlpSpec,
    params: &ParamVector,
    states: &Array2<f64>,
    action_dim: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(crate::neural::ForwardPass, SampledActions), RlError> {
    let fwd = mlp_forward(spec, params, states)?;
    let n = states.nrows();
    let out = fwd.output().clone();
    let mut u = Array2::zeros((n, action_dim));
    let mut actions = Array2::zeros((n, action_dim));
    let mut noise = Array2::zeros((n, action_dim));
    let mut log_stds = Array2::zeros((n, action_dim));
    let mut raw_log_stds = Array2::zeros((n, action_dim));
    let mut log_prob = vec![0.0; n];
    for i in 0..n {
        for d in 0..action_dim {
            let mean = out[[i, d]];
            let raw_log_std = out[[i, action_dim + d]];
            let log_std = raw_log_std.clamp(ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX);
            let eps: f64 = StandardNormal.sample(rng);
            let u_id = mean + log_std.exp() * eps;
            u[[i, d]] = u_id;
            actions[[i, d]] = u_id.tanh();
            noise[[i, d]] = eps;
            log_stds[[i, d]] = log_std;
            raw_log_stds[[i, d]] = raw_log_std;
            log_prob[i] += squashed_gaussian_log_density(u_id, mean, log_std);
        }
    }
    Ok((
        fwd,
        SampledActions {
            u,
            actions,
            noise,
            log_prob,
            log_stds,
            raw_log_stds,
        },
    ))
}

/// One SAC update: both critics regress to the entropy-regularized target,
/// then the actor minimizes alpha*log pi - min(Q1, Q2).
pub fn sac_step(model: &mut Sac, batch: &ContinuousBatch, cfg: &SacConfig) -> Result<SacLosses, RlError> {
    let n = batch.len();
    assert!(n > 0, "empty batch");
    let state_dim = batch.states.ncols();
    let mut rng = ChaCha20Rng::seed_from_u64(crate::stats::derive_seed(
        model.rng_seed,
        model.rng_calls,
    ));
    model.rng_calls += 1;

    // Target: y = r + gamma * (min_i Q_target_i(s', a') - alpha * log pi(a'|s')).
    let (_, next_sample) = sample_actions(
        &model.actor_spec,
        &model.actor,
        &batch.next_states,
        model.action_dim,
        &mut rng,
    )?;
    let next_input = concat_columns(&batch.next_states, &next_sample.actions);
    let q1_next = mlp_forward(&model.critic_spec, &model.critic1_target, &next_input)?;
    let q2_next = mlp_forward(&model.critic_spec, &model.critic2_target, &next_input)?;
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let q_min = q1_next.output()[[i, 0]].min(q2_next.output()[[i, 0]]);
        targets.push(
            batch.rewards[i]
                + batch.discount[i] * (q_min - cfg.alpha * next_sample.log_prob[i]),
        );
    }

    // Critic regressions.
    let critic_input = concat_columns(&batch.states, &batch.actions);
    let mut critic_losses = [0.0; 2];
    for (idx, (params, opt)) in [
        (&mut model.critic1, &mut model.critic1_opt),
        (&mut model.critic2, &mut model.critic2_opt),
    ]
    .into_iter()
    .enumerate()
    {
        let fwd = mlp_forward(&model.critic_spec, params, &critic_input)?;
        let mut upstream = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let error = fwd.output()[[i, 0]] - targets[i];
            loss += error * error;
            upstream[[i, 0]] = 2.0 * error / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(RlError::NonFiniteLoss(String::new()));
        }
        let (grads, _) = mlp_backward(&model.critic_spec, params, &fwd, &upstream)?;
        adam_step(params, &grads, opt);
        critic_losses[idx] = loss;
    }

    // Actor: minimize mean(alpha * log pi(a|s) - min_i Q_i(s, a)) with a
    // reparameterized sample.
    let (actor_fwd, sample) = sample_actions(
        &model.actor_spec,
        &model.actor,
        &batch.states,
        model.action_dim,
        &mut rng,
    )?;
    let q_input = concat_columns(&batch.states, &sample.actions);
    let q1_fwd = mlp_forward(&model.critic_spec, &model.critic1, &q_input)?;
    let q2_fwd = mlp_forward(&model.critic_spec, &model.critic2, &q_input)?;

    let mut actor_loss = 0.0;
    // route dQ/da through whichever critic attains the min, per sample
    let mut upstream1 = Array2::zeros((n, 1));
    let mut upstream2 = Array2::zeros((n, 1));
    for i in 0..n {
        let q1 = q1_fwd.output()[[i, 0]];
        let q2 = q2_fwd.output()[[i, 0]];
        actor_loss += cfg.alpha * sample.log_prob[i] - q1.min(q2);
        if q1 <= q2 {
            upstream1[[i, 0]] = 1.0;
        } else {
            upstream2[[i, 0]] = 1.0;
        }
    }
    actor_loss /= n as f64;
    if !actor_loss.is_finite() {
        return Err(RlError::NonFiniteLoss(String::new()));
    }
    let (_, q1_in_grad) = mlp_backward(&model.critic_spec, &model.critic1, &q1_fwd, &upstream1)?;
    let (_, q2_in_grad) = mlp_backward(&model.critic_spec, &model.critic2, &q2_fwd, &upstream2)?;
    let dq_daction = {
        let g1 = q1_in_grad.slice(s![.., state_dim..]).to_owned();
        let g2 = q2_in_grad.slice(s![.., state_dim..]).to_owned();
        g1 + g2
    };

    // Gradients with respect to the raw actor outputs [mean | log_std].
    let mut actor_upstream = Array2::zeros((n, 2 * model.action_dim));
    for i in 0..n {
        for d in 0..model.action_dim {
            let t = sample.u[[i, d]].tanh();
            let dtanh = 1.0 - t * t;
            let std = sample.log_stds[[i, d]].exp();
            let eps = sample.noise[[i, d]];
            // d log pi / du through the squash correction
            let dlogp_du = 2.0 * t * dtanh / (dtanh + TANH_EPS);
            let dlogp_dmean = dlogp_du;
            let dq_term = dq_daction[[i, d]];
            // d loss / d mean
            actor_upstream[[i, d]] =
                (cfg.alpha * dlogp_dmean - dq_term * dtanh) / n as f64;
            // d loss / d log_std (zero where the clamp is active)
            let raw = sample.raw_log_stds[[i, d]];
            if (ACTOR_LOG_STD_MIN..=ACTOR_LOG_STD_MAX).contains(&raw) {
                let du_dlogstd = std * eps;
                let dlogp_dlogstd = -1.0 + dlogp_du * du_dlogstd;
                actor_upstream[[i, model.action_dim + d]] =
                    (cfg.alpha * dlogp_dlogstd - dq_term * dtanh * du_dlogstd) / n as f64;
            }
        }
    }
    let (actor_grads, _) =
        mlp_backward(&model.actor_spec, &model.actor, &actor_fwd, &actor_upstream)?;
    adam_step(&mut model.actor, &actor_grads, &mut model.actor_opt);

    polyak_update(&mut model.critic1_target, &model.critic1, cfg.tau);
    polyak_update(&mut model.critic2_target, &model.critic2, cfg.tau);

    Ok(SacLosses {
        critic1_loss: critic_losses[0],
        critic2_loss: critic_losses[1],
        actor_loss,
    })
}
