//! Discrete-action DQN: Q-network with optional dueling head, TD targets
//! (standard max, double, SARSA, multi-step), and the train step.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::neural::{adam_step, mlp_backward, mlp_forward, AdamState, Activation, MlpSpec, ParamVector};

use super::{polyak_update, DqnConfig, RlError, TargetUpdate};

/// Output-head interpretation of the raw MLP output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QHead {
    /// One output per action.
    Direct { num_actions: usize },
    /// First output is the state value, the rest are per-action advantages.
    Dueling { num_actions: usize },
    /// Scalar output over a concatenated state-action input.
    Parametric,
}

impl QHead {
    pub fn raw_width(&self) -> usize {
        match self {
            QHead::Direct { num_actions } => *num_actions,
            QHead::Dueling { num_actions } => num_actions + 1,
            QHead::Parametric => 1,
        }
    }

    pub fn num_actions(&self) -> Option<usize> {
        match self {
            QHead::Direct { num_actions } | QHead::Dueling { num_actions } => Some(*num_actions),
            QHead::Parametric => None,
        }
    }
}

/// An MLP with a Q-value head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QNetwork {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub head: QHead,
}

impl QNetwork {
    /// Discrete-action network over preprocessed state vectors.
    pub fn new_discrete(
        input_width: usize,
        hidden: &[usize],
        num_actions: usize,
        dueling: bool,
        seed: u64,
    ) -> Self {
        Self::new_discrete_with(input_width, hidden, num_actions, dueling, Activation::Relu, seed)
    }

    pub fn new_discrete_with(
        input_width: usize,
        hidden: &[usize],
        num_actions: usize,
        dueling: bool,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let head = if dueling {
            QHead::Dueling { num_actions }
        } else {
            QHead::Direct { num_actions }
        };
        let mut widths = vec![input_width];
        widths.extend_from_slice(hidden);
        widths.push(head.raw_width());
        let spec = MlpSpec::new(widths, activation, seed);
        let params = spec.init_params();
        QNetwork { spec, params, head }
    }

    /// Scalar network over concatenated state-action vectors.
    pub fn new_parametric(input_width: usize, hidden: &[usize], seed: u64) -> Self {
        Self::new_parametric_with(input_width, hidden, Activation::Relu, seed)
    }

    pub fn new_parametric_with(
        input_width: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut widths = vec![input_width];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths, activation, seed);
        let params = spec.init_params();
        QNetwork {
            spec,
            params,
            head: QHead::Parametric,
        }
    }

    /// Q-values for a batch of states (N x |A|), applying the dueling
    /// combination when configured.
    pub fn q_values(&self, states: &Array2<f64>) -> Result<Array2<f64>, RlError> {
        let fwd = mlp_forward(&self.spec, &self.params, states)?;
        Ok(self.combine_head(fwd.output()))
    }

    pub(crate) fn combine_head(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.head {
            QHead::Direct { .. } | QHead::Parametric => raw.clone(),
            QHead::Dueling { num_actions } => {
                let v = raw.column(0).to_owned();
                let a = raw.slice(ndarray::s![.., 1..=num_actions]).to_owned();
                dueling_combine(&v, &a)
            }
        }
    }

    /// Map dLoss/dQ back to dLoss/draw-output through the head.
    pub fn upstream_through_head(&self, dq: &Array2<f64>) -> Array2<f64> {
        match self.head {
            QHead::Direct { .. } | QHead::Parametric => dq.clone(),
            QHead::Dueling { num_actions } => {
                let n = dq.nrows();
                let mut raw = Array2::zeros((n, num_actions + 1));
                for r in 0..n {
                    let row_sum: f64 = dq.row(r).sum();
                    raw[[r, 0]] = row_sum;
                    let mean = row_sum / num_actions as f64;
                    for a in 0..num_actions {
                        raw[[r, a + 1]] = dq[[r, a]] - mean;
                    }
                }
                raw
            }
        }
    }
}

/// Dueling combination: Q(s, a) = V(s) + A(s, a) - mean_a' A(s, a').
pub fn dueling_combine(v: &Array1<f64>, a: &Array2<f64>) -> Array2<f64> {
    assert_eq!(v.len(), a.nrows(), "V/A row mismatch");
    let mean = a.mean_axis(Axis(1)).expect("at least one action");
    let mut q = a.clone();
    for r in 0..q.nrows() {
        for c in 0..q.ncols() {
            q[[r, c]] += v[r] - mean[r];
        }
    }
    q
}

/// A preprocessed minibatch for the discrete train step. Rewards are already
/// accumulated over `multi_step` steps and `discount` carries the matching
/// gamma power (zero bootstrap for terminal tails).
#[derive(Debug, Clone)]
pub struct DqnBatch {
    pub states: Array2<f64>,
    pub action_index: Vec<usize>,
    pub rewards: Vec<f64>,
    pub bootstrap_states: Array2<f64>,
    /// False where the n-step window hit the episode end (pure Monte-Carlo
    /// target).
    pub has_bootstrap: Vec<bool>,
    /// gamma^n per row (or gamma^sum-of-time-diffs with time-diff discounting).
    pub discount: Vec<f64>,
    /// Allowed actions at the bootstrap state.
    pub possible_next: Vec<Vec<bool>>,
    /// Logged action at the bootstrap state, for SARSA targets.
    pub next_action_index: Vec<Option<usize>>,
}

impl DqnBatch {
    pub fn len(&self) -> usize {
        self.action_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_index.is_empty()
    }
}

fn masked_argmax(row: ndarray::ArrayView1<f64>, mask: &[bool]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &q) in row.iter().enumerate() {
        if mask[i] && q > best.1 {
            best = (i, q);
        }
    }
    best.0
}

/// TD targets for a batch, with gradients stopped through the target network.
pub fn td_target(
    batch: &DqnBatch,
    online: &QNetwork,
    target: &QNetwork,
    cfg: &DqnConfig,
) -> Result<Vec<f64>, RlError> {
    let n = batch.len();
    let q_target = target.q_values(&batch.bootstrap_states)?;
    let q_online = if cfg.double_q && !cfg.sarsa {
        Some(online.q_values(&batch.bootstrap_states)?)
    } else {
        None
    };
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let mut y = batch.rewards[i];
        if batch.has_bootstrap[i] {
            let bootstrap = if cfg.sarsa {
                let a = batch.next_action_index[i].ok_or_else(|| {
                    RlError::InvalidConfig("SARSA target needs the logged next action".into())
                })?;
                q_target[[i, a]]
            } else {
                let mask = &batch.possible_next[i];
                if !mask.iter().any(|&m| m) {
                    return Err(RlError::NoCandidates);
                }
                match &q_online {
                    Some(qo) => {
                        let a = masked_argmax(qo.row(i), mask);
                        q_target[[i, a]]
                    }
                    None => {
                        let a = masked_argmax(q_target.row(i), mask);
                        q_target[[i, a]]
                    }
                }
            };
            y += batch.discount[i] * bootstrap;
        }
        targets.push(y);
    }
    Ok(targets)
}

/// One optimizer step on a minibatch. Returns the mean TD loss. The target
/// network is refreshed according to `cfg.target_update` using `step`, the
/// 1-based index of this optimizer step.
pub fn dqn_train_step(
    batch: &DqnBatch,
    online: &mut QNetwork,
    target: &mut QNetwork,
    opt: &mut AdamState,
    cfg: &DqnConfig,
    step: u64,
) -> Result<f64, RlError> {
    let n = batch.len();
    assert!(n > 0, "empty batch");
    let targets = td_target(batch, online, target, cfg)?;

    let fwd = mlp_forward(&online.spec, &online.params, &batch.states)?;
    let q_all = online.combine_head(fwd.output());

    let mut loss_total = 0.0;
    let mut dq = Array2::zeros(q_all.dim());
    for i in 0..n {
        let a = batch.action_index[i];
        let error = q_all[[i, a]] - targets[i];
        let (value, grad) = cfg.loss.value_and_grad(error);
        loss_total += value;
        dq[[i, a]] = grad / n as f64;
    }
    let loss = loss_total / n as f64;
    if !loss.is_finite() {
        return Err(RlError::NonFiniteLoss(diagnose_activations(&fwd.activations)));
    }

    let upstream = online.upstream_through_head(&dq);
    let (grads, _) = mlp_backward(&online.spec, &online.params, &fwd, &upstream)?;
    adam_step(&mut online.params, &grads, opt);

    match cfg.target_update {
        TargetUpdate::Hard { every } => {
            if step % every.max(1) == 0 {
                target.params = online.params.clone();
            }
        }
        TargetUpdate::Polyak { tau } => polyak_update(&mut target.params, &online.params, tau),
    }
    Ok(loss)
}

/// Name the layer/unit with the largest activation magnitude, for the
/// non-finite-loss abort message.
pub(crate) fn diagnose_activations(activations: &[Array2<f64>]) -> String {
    let mut worst = (0usize, 0usize, 0.0f64);
    for (layer, act) in activations.iter().enumerate() {
        for (idx, &v) in act.iter().enumerate() {
            if v.abs() > worst.2 {
                worst = (layer, idx % act.ncols(), v.abs());
            }
        }
    }
    format!(
        " (largest activation {:.3e} at layer {}, unit {})",
        worst.2, worst.0, worst.1
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dueling_combine_examples() {
        let q = dueling_combine(&array![1.0], &array![[2.0, 0.0]]);
        assert_eq!(q, array![[2.0, 0.0]]);

        // constant advantages collapse to V
        let q = dueling_combine(&array![0.7], &array![[3.0, 3.0, 3.0]]);
        for &v in q.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }

        // adding a constant to all advantages changes nothing
        let a = array![[1.0, -2.0, 0.5]];
        let shifted = a.mapv(|v| v + 11.0);
        let q1 = dueling_combine(&array![0.3], &a);
        let q2 = dueling_combine(&array![0.3], &shifted);
        for (x, y) in q1.iter().zip(q2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn constant_q_network(values: &[f64]) -> QNetwork {
        // zero weights, biases = values: network outputs `values` for any input
        let num_actions = values.len();
        let spec = MlpSpec::new(vec![2, num_actions], Activation::Linear, 0);
        let mut params = ParamVector::zeros_like(&spec);
        let offset = 2 * num_actions;
        params.data[offset..].copy_from_slice(values);
        QNetwork {
            spec,
            params,
            head: QHead::Direct { num_actions },
        }
    }

    fn batch_one(reward: f64, terminal: bool, mask: Vec<bool>, next_action: Option<usize>, discount: f64) -> DqnBatch {
        DqnBatch {
            states: Array2::zeros((1, 2)),
            action_index: vec![0],
            rewards: vec![reward],
            bootstrap_states: Array2::zeros((1, 2)),
            has_bootstrap: vec![!terminal],
            discount: vec![discount],
            possible_next: vec![mask],
            next_action_index: vec![next_action],
        }
    }

    #[test]
    fn td_target_standard_max() {
        let online = constant_q_network(&[0.0, 0.0]);
        let target = constant_q_network(&[2.0, 3.0]);
        let cfg = DqnConfig {
            double_q: false,
            gamma: 0.9,
            ..DqnConfig::default()
        };
        let batch = batch_one(1.0, false, vec![true, true], None, 0.9);
        let y = td_target(&batch, &online, &target, &cfg).unwrap();
        assert!((y[0] - 3.7).abs() < 1e-12);
    }

    #[test]
    fn td_target_double_uses_online_argmax() {
        // online picks a0 (5 > 1), target evaluates a0 at 2 -> y = 1 + 0.9*2
        let online = constant_q_network(&[5.0, 1.0]);
        let target = constant_q_network(&[2.0, 9.0]);
        let cfg = DqnConfig {
            double_q: true,
            ..DqnConfig::default()
        };
        let batch = batch_one(1.0, false, vec![true, true], None, 0.9);
        let y = td_target(&batch, &online, &target, &cfg).unwrap();
        assert!((y[0] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn td_target_terminal_is_reward() {
        let online = constant_q_network(&[5.0, 1.0]);
        let target = constant_q_network(&[2.0, 9.0]);
        let batch = batch_one(1.0, true, vec![true, true], None, 0.9);
        let y = td_target(&batch, &online, &target, &DqnConfig::default()).unwrap();
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn td_target_respects_possible_action_mask() {
        let online = constant_q_network(&[0.0, 0.0]);
        let target = constant_q_network(&[2.0, 9.0]);
        let cfg = DqnConfig {
            double_q: false,
            gamma: 1.0,
            ..DqnConfig::default()
        };
        // action 1 not possible at the next state
        let batch = batch_one(0.0, false, vec![true, false], None, 1.0);
        let y = td_target(&batch, &online, &target, &cfg).unwrap();
        assert_eq!(y[0], 2.0);
    }

    #[test]
    fn td_target_sarsa_bootstraps_on_logged_action() {
        let online = constant_q_network(&[0.0, 0.0]);
        let target = constant_q_network(&[2.0, 9.0]);
        let cfg = DqnConfig {
            sarsa: true,
            gamma: 1.0,
            ..DqnConfig::default()
        };
        let batch = batch_one(0.5, false, vec![true, true], Some(0), 1.0);
        let y = td_target(&batch, &online, &target, &cfg).unwrap();
        assert_eq!(y[0], 2.5);
    }

    #[test]
    fn double_q_with_shared_networks_equals_standard_max() {
        let spec = MlpSpec::new(vec![3, 8, 4], Activation::Relu, 17);
        let params = spec.init_params();
        let net = QNetwork {
            spec,
            params,
            head: QHead::Direct { num_actions: 4 },
        };
        let batch = DqnBatch {
            states: Array2::from_shape_fn((6, 3), |(r, c)| (r * 3 + c) as f64 * 0.1),
            action_index: vec![0; 6],
            rewards: vec![1.0; 6],
            bootstrap_states: Array2::from_shape_fn((6, 3), |(r, c)| (r + c) as f64 * 0.2 - 0.5),
            has_bootstrap: vec![true; 6],
            discount: vec![0.9; 6],
            possible_next: vec![vec![true; 4]; 6],
            next_action_index: vec![None; 6],
        };
        let double_cfg = DqnConfig {
            double_q: true,
            ..DqnConfig::default()
        };
        let standard_cfg = DqnConfig {
            double_q: false,
            ..DqnConfig::default()
        };
        let y_double = td_target(&batch, &net, &net.clone(), &double_cfg).unwrap();
        let y_standard = td_target(&batch, &net, &net.clone(), &standard_cfg).unwrap();
        for (a, b) in y_double.iter().zip(&y_standard) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_td_error_leaves_parameters_unchanged() {
        // Q == 0 everywhere (zero params), terminal rows with reward 0
        let spec = MlpSpec::new(vec![2, 2], Activation::Linear, 0);
        let mut online = QNetwork {
            params: ParamVector::zeros_like(&spec),
            spec: spec.clone(),
            head: QHead::Direct { num_actions: 2 },
        };
        let mut target = online.clone();
        let mut opt = AdamState::new(0.1, online.params.len());
        let batch = batch_one(0.0, true, vec![true, true], None, 1.0);
        let before = online.params.clone();
        let loss =
            dqn_train_step(&batch, &mut online, &mut target, &mut opt, &DqnConfig::default(), 1)
                .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(online.params, before);
    }

    #[test]
    fn aggressive_learning_rate_blows_up_loss() {
        let mut online = QNetwork::new_discrete(3, &[16], 2, false, 3);
        let mut target = online.clone();
        let mut opt = AdamState::new(50.0, online.params.len());
        let cfg = DqnConfig {
            target_update: TargetUpdate::Hard { every: 1_000_000 },
            ..DqnConfig::default()
        };
        let batch = DqnBatch {
            states: Array2::from_shape_fn((8, 3), |(r, c)| ((r + 1) * (c + 1)) as f64 * 0.3),
            action_index: vec![0, 1, 0, 1, 0, 1, 0, 1],
            rewards: vec![1.0; 8],
            bootstrap_states: Array2::from_shape_fn((8, 3), |(r, c)| (r as f64 - c as f64) * 0.4),
            has_bootstrap: vec![true; 8],
            discount: vec![0.9; 8],
            possible_next: vec![vec![true, true]; 8],
            next_action_index: vec![None; 8],
        };
        let mut losses = Vec::new();
        for step in 1..=30 {
            losses.push(
                dqn_train_step(&batch, &mut online, &mut target, &mut opt, &cfg, step).unwrap(),
            );
        }
        assert!(
            losses.last().unwrap() > &(losses[0] * 10.0),
            "losses {losses:?}"
        );
    }

    #[test]
    fn hard_target_update_copies_online() {
        let mut online = QNetwork::new_discrete(2, &[4], 2, false, 1);
        let mut target = online.clone();
        let mut opt = AdamState::new(0.01, online.params.len());
        let cfg = DqnConfig {
            target_update: TargetUpdate::Hard { every: 3 },
            ..DqnConfig::default()
        };
        let batch = batch_one(1.0, false, vec![true, true], None, 0.9);
        for step in 1..=2 {
            dqn_train_step(&batch, &mut online, &mut target, &mut opt, &cfg, step).unwrap();
            assert_ne!(target.params, online.params);
        }
        dqn_train_step(&batch, &mut online, &mut target, &mut opt, &cfg, 3).unwrap();
        assert_eq!(target.params, online.params);
    }

    #[test]
    fn parameters_stay_finite_after_training() {
        let mut online = QNetwork::new_discrete(2, &[8], 2, true, 5);
        let mut target = online.clone();
        let mut opt = AdamState::new(1e-3, online.params.len());
        let batch = batch_one(1.0, false, vec![true, true], None, 0.9);
        for step in 1..=200 {
            dqn_train_step(&batch, &mut online, &mut target, &mut opt, &DqnConfig::default(), step)
                .unwrap();
        }
        assert!(online.params.all_finite());
    }

    #[test]
    fn dueling_head_gradcheck() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha20Rng;
        let net = QNetwork::new_discrete(3, &[5], 3, true, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let states = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5);
        let weights = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5);
        // loss = sum(weights * Q)
        let loss_of = |p: &ParamVector| {
            let net2 = QNetwork {
                spec: net.spec.clone(),
                params: p.clone(),
                head: net.head,
            };
            (net2.q_values(&states).unwrap() * &weights).sum()
        };
        let fwd = mlp_forward(&net.spec, &net.params, &states).unwrap();
        let upstream = net.upstream_through_head(&weights);
        let (analytic, _) = mlp_backward(&net.spec, &net.params, &fwd, &upstream).unwrap();
        let h = 1e-5;
        for i in 0..net.params.len() {
            let mut plus = net.params.clone();
            plus.data[i] += h;
            let mut minus = net.params.clone();
            minus.data[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let err = (analytic.data[i] - fd).abs() / analytic.data[i].abs().max(fd.abs()).max(1e-6);
            assert!(err <= 1e-4, "param {i}: analytic {} fd {fd}", analytic.data[i]);
        }
    }
}
