//! Parametric-action DQN: the network scores concatenated state-action
//! feature vectors one candidate at a time, so very large or ephemeral
//! action sets need no fixed output head.

use ndarray::Array2;

use crate::neural::{adam_step, mlp_backward, mlp_forward, AdamState};

use super::dqn::diagnose_activations;
use super::{DqnConfig, QNetwork, RlError, TargetUpdate};

/// Q-values for one state against a list of candidate action vectors.
pub fn parametric_q(
    net: &QNetwork,
    state: &[f64],
    candidates: &[Vec<f64>],
) -> Result<Vec<f64>, RlError> {
    if candidates.is_empty() {
        return Err(RlError::NoCandidates);
    }
    let action_width = candidates[0].len();
    let mut input = Array2::zeros((candidates.len(), state.len() + action_width));
    for (r, action) in candidates.iter().enumerate() {
        for (c, &v) in state.iter().enumerate() {
            input[[r, c]] = v;
        }
        for (c, &v) in action.iter().enumerate() {
            input[[r, state.len() + c]] = v;
        }
    }
    let fwd = mlp_forward(&net.spec, &net.params, &input)?;
    Ok(fwd.output().column(0).to_vec())
}

/// Minibatch for the parametric train step. Candidate rows for every
/// transition's bootstrap state are stacked into one matrix with per-row
/// ownership ranges.
#[derive(Debug, Clone)]
pub struct ParametricBatch {
    /// Concatenated (state, logged action) rows.
    pub state_action: Array2<f64>,
    pub rewards: Vec<f64>,
    pub discount: Vec<f64>,
    /// Stacked (next state, candidate action) rows for all transitions.
    pub next_candidates: Array2<f64>,
    /// Range of candidate rows per transition; empty range = terminal.
    pub candidate_ranges: Vec<(usize, usize)>,
}

impl ParametricBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// One optimizer step for parametric-action DQN. Returns the mean TD loss.
pub fn parametric_train_step(
    batch: &ParametricBatch,
    online: &mut QNetwork,
    target: &mut QNetwork,
    opt: &mut AdamState,
    cfg: &DqnConfig,
    step: u64,
) -> Result<f64, RlError> {
    let n = batch.len();
    assert!(n > 0, "empty batch");

    // Score all bootstrap candidates in one pass.
    let mut targets = batch.rewards.clone();
    if batch.next_candidates.nrows() > 0 {
        let q_target = mlp_forward(&target.spec, &target.params, &batch.next_candidates)?;
        let q_target = q_target.output().column(0).to_owned();
        let q_online = if cfg.double_q {
            let fwd = mlp_forward(&online.spec, &online.params, &batch.next_candidates)?;
            Some(fwd.output().column(0).to_owned())
        } else {
            None
        };
        for i in 0..n {
            let (lo, hi) = batch.candidate_ranges[i];
            if lo == hi {
                continue; // terminal
            }
            let best = match &q_online {
                Some(qo) => {
                    let mut arg = lo;
                    for r in lo..hi {
                        if qo[r] > qo[arg] {
                            arg = r;
                        }
                    }
                    q_target[arg]
                }
                None => (lo..hi).map(|r| q_target[r]).fold(f64::NEG_INFINITY, f64::max),
            };
            targets[i] += batch.discount[i] * best;
        }
    }

    let fwd = mlp_forward(&online.spec, &online.params, &batch.state_action)?;
    let mut loss_total = 0.0;
    let mut upstream = Array2::zeros((n, 1));
    for i in 0..n {
        let error = fwd.output()[[i, 0]] - targets[i];
        let (value, grad) = cfg.loss.value_and_grad(error);
        loss_total += value;
        upstream[[i, 0]] = grad / n as f64;
    }
    let loss = loss_total / n as f64;
    if !loss.is_finite() {
        return Err(RlError::NonFiniteLoss(diagnose_activations(&fwd.activations)));
    }
    let (grads, _) = mlp_backward(&online.spec, &online.params, &fwd, &upstream)?;
    adam_step(&mut online.params, &grads, opt);

    match cfg.target_update {
        TargetUpdate::Hard { every } => {
            if step % every.max(1) == 0 {
                target.params = online.params.clone();
            }
        }
        TargetUpdate::Polyak { tau } => super::polyak_update(&mut target.params, &online.params, tau),
    }
    Ok(loss)
}
