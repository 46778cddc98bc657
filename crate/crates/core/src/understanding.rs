//! Data understanding: fit a Gaussian-mixture environment model on the
//! training data and check that the problem formulation actually looks like
//! an MDP.
//!
//! The model is an MLP over normalized (state, action) inputs whose output
//! parameterizes a mixture of diagonal Gaussians over the next state, the
//! reward, or both. Two checks run on top of fitted models:
//!
//!  1. transitions are predictable: masking the action must hurt the
//!     next-state model, and so must masking at least one state feature
//!     (otherwise there is no sequential structure and the problem is a
//!     bandit);
//!  2. rewards link states and actions: some state feature must both react
//!     to the chosen action (in the next-state model's predictions) and
//!     matter to the reward model.
//!
//! A feature's importance is the increase in held-out model loss when the
//! feature is masked to its training mean.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{
    adam_step, gmm_nll, gmm_nll_grad, mlp_backward, mlp_forward, AdamState, Activation,
    GmmHeadOutput, MlpSpec, ParamVector,
};
use crate::normalization::Preprocessor;
use crate::stats::fnv1a64;
use crate::threads;
use crate::timeline::{ActionValue, JoinedTransition};

#[derive(Debug, Error)]
pub enum UnderstandError {
    #[error("no transitions to fit on")]
    NoData,
    #[error("need at least one non-terminal transition for the next-state model")]
    NoNextStates,
    #[error("continuous action spaces need the sampled-action variant (set a discrete or parametric action encoding in the config)")]
    ContinuousActions,
    #[error("transition has a {got} action but the dataset was encoded as {expected}")]
    MixedActionKinds { got: String, expected: String },
}

/// What the mixture model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTarget {
    NextState,
    Reward,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvModelConfig {
    /// Number of mixture components (k).
    pub mixture_components: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EnvModelConfig {
    fn default() -> Self {
        EnvModelConfig {
            mixture_components: 3,
            hidden: vec![32, 32],
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Encodes logged actions into model input columns.
#[derive(Debug, Clone)]
pub enum ActionEncoder {
    /// One-hot over the sorted distinct action names; masked as one group.
    Discrete { names: Vec<String> },
    /// Normalized action features, one group per feature.
    Parametric { preprocessor: Preprocessor },
}

impl ActionEncoder {
    /// Derive an encoder from the logged actions.
    pub fn from_transitions(
        transitions: &[JoinedTransition],
    ) -> Result<ActionEncoder, UnderstandError> {
        let mut names = std::collections::BTreeSet::new();
        let mut feature_rows: Vec<&BTreeMap<String, f64>> = Vec::new();
        for t in transitions {
            match &t.action {
                ActionValue::Discrete(name) => {
                    if !feature_rows.is_empty() {
                        return Err(UnderstandError::MixedActionKinds {
                            got: "discrete".into(),
                            expected: "parametric".into(),
                        });
                    }
                    names.insert(name.clone());
                }
                ActionValue::Parametric(features) => {
                    if !names.is_empty() {
                        return Err(UnderstandError::MixedActionKinds {
                            got: "parametric".into(),
                            expected: "discrete".into(),
                        });
                    }
                    feature_rows.push(features);
                }
            }
            if let Some(possible) = &t.possible_actions {
                for a in possible {
                    if let ActionValue::Discrete(name) = a {
                        names.insert(name.clone());
                    }
                }
            }
        }
        if !names.is_empty() {
            Ok(ActionEncoder::Discrete {
                names: names.into_iter().collect(),
            })
        } else if !feature_rows.is_empty() {
            Err(UnderstandError::ContinuousActions)
        } else {
            Err(UnderstandError::NoData)
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ActionEncoder::Discrete { names } => names.len(),
            ActionEncoder::Parametric { preprocessor } => preprocessor.output_width(),
        }
    }

    fn encode_into(&self, action: &ActionValue, out: &mut [f64]) {
        match (self, action) {
            (ActionEncoder::Discrete { names }, ActionValue::Discrete(name)) => {
                if let Ok(pos) = names.binary_search(name) {
                    out[pos] = 1.0;
                }
            }
            (ActionEncoder::Parametric { preprocessor }, ActionValue::Parametric(features)) => {
                out.copy_from_slice(&preprocessor.transform_row(features));
            }
            _ => {}
        }
    }

    /// Column groups for masking, in input-column coordinates (already offset
    /// by the state width).
    fn groups(&self, offset: usize) -> Vec<(String, usize, usize)> {
        match self {
            ActionEncoder::Discrete { names } => {
                vec![("action".to_string(), offset, names.len())]
            }
            ActionEncoder::Parametric { preprocessor } => preprocessor
                .layout()
                .iter()
                .map(|(id, (o, w))| (format!("action/{id}"), offset + o, *w))
                .collect(),
        }
    }

    pub fn num_discrete_actions(&self) -> Option<usize> {
        match self {
            ActionEncoder::Discrete { names } => Some(names.len()),
            ActionEncoder::Parametric { .. } => None,
        }
    }
}

/// A fitted mixture-density environment model.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub mixture_components: usize,
    pub target_dim: usize,
    pub target: FitTarget,
    /// Per-input-column training means, the masking values.
    pub input_means: Vec<f64>,
    /// Feature-name -> (first column, width) for state and action groups.
    pub input_groups: Vec<(String, usize, usize)>,
    /// Target-column labels (state feature names, or "reward").
    pub target_labels: Vec<String>,
    pub held_out_nll: f64,
    pub initial_held_out_nll: f64,
}

impl EnvModel {
    /// True when training moved the held-out NLL below its initialization
    /// value; a report-level warning otherwise.
    pub fn converged(&self) -> bool {
        self.held_out_nll < self.initial_held_out_nll
    }

    fn mean_nll(&self, inputs: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let fwd = mlp_forward(&self.spec, &self.params, inputs).expect("shape");
        let out = fwd.output();
        let mut total = 0.0;
        for i in 0..inputs.nrows() {
            let head = GmmHeadOutput::from_raw(
                out.row(i).as_slice().unwrap(),
                self.mixture_components,
                self.target_dim,
            );
            total += gmm_nll(&head, targets.row(i).as_slice().unwrap());
        }
        total / inputs.nrows() as f64
    }

    /// Predicted mixture means for a batch of inputs.
    fn predict_means(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let fwd = mlp_forward(&self.spec, &self.params, inputs).expect("shape");
        let out = fwd.output();
        let mut means = Array2::zeros((inputs.nrows(), self.target_dim));
        for i in 0..inputs.nrows() {
            let head = GmmHeadOutput::from_raw(
                out.row(i).as_slice().unwrap(),
                self.mixture_components,
                self.target_dim,
            );
            means.row_mut(i).assign(&head.mean());
        }
        means
    }
}

/// Encoded dataset split for model fitting.
pub struct EncodedData {
    pub train_inputs: Array2<f64>,
    pub train_targets: Array2<f64>,
    pub held_inputs: Array2<f64>,
    pub held_targets: Array2<f64>,
    pub input_groups: Vec<(String, usize, usize)>,
    pub target_labels: Vec<String>,
    pub state_width: usize,
}

/// Encode transitions into normalized (state, action) inputs and targets for
/// `target`. The held-out split is by mdp_id (hash-based 20%), so episodes
/// never leak across the split. Terminal transitions are excluded when the
/// target includes the next state.
pub fn encode_dataset(
    transitions: &[JoinedTransition],
    preprocessor: &Preprocessor,
    encoder: &ActionEncoder,
    target: FitTarget,
    reward_of: &dyn Fn(&JoinedTransition) -> f64,
) -> Result<EncodedData, UnderstandError> {
    let usable: Vec<&JoinedTransition> = transitions
        .iter()
        .filter(|t| match target {
            FitTarget::NextState | FitTarget::Joint => !t.terminal,
            FitTarget::Reward => true,
        })
        .collect();
    if usable.is_empty() {
        return Err(if matches!(target, FitTarget::Reward) {
            UnderstandError::NoData
        } else {
            UnderstandError::NoNextStates
        });
    }

    let state_width = preprocessor.output_width();
    let width = state_width + encoder.width();
    let state_dim = preprocessor.output_width();
    let target_dim = match target {
        FitTarget::NextState => state_dim,
        FitTarget::Reward => 1,
        FitTarget::Joint => state_dim + 1,
    };

    let mut target_labels: Vec<String> = Vec::new();
    if matches!(target, FitTarget::NextState | FitTarget::Joint) {
        let mut labels = vec![String::new(); state_dim];
        for (id, (offset, w)) in preprocessor.layout() {
            for i in 0..*w {
                labels[offset + i] = if *w == 1 {
                    id.clone()
                } else {
                    format!("{id}[{i}]")
                };
            }
        }
        target_labels.extend(labels);
    }
    if matches!(target, FitTarget::Reward | FitTarget::Joint) {
        target_labels.push("reward".to_string());
    }

    let mut inputs = Array2::zeros((usable.len(), width));
    let mut targets = Array2::zeros((usable.len(), target_dim));
    let mut in_held = Vec::with_capacity(usable.len());
    for (r, t) in usable.iter().enumerate() {
        let state = preprocessor.transform_row(&t.state_features);
        inputs.row_mut(r).slice_mut(ndarray::s![..state_width]).assign(
            &ndarray::Array1::from_vec(state),
        );
        encoder.encode_into(
            &t.action,
            inputs
                .row_mut(r)
                .slice_mut(ndarray::s![state_width..])
                .into_slice()
                .expect("contiguous row"),
        );
        let mut col = 0;
        if matches!(target, FitTarget::NextState | FitTarget::Joint) {
            let next = preprocessor
                .transform_row(t.next_state_features.as_ref().expect("non-terminal"));
            for v in next {
                targets[[r, col]] = v;
                col += 1;
            }
        }
        if matches!(target, FitTarget::Reward | FitTarget::Joint) {
            targets[[r, col]] = reward_of(t);
        }
        in_held.push(fnv1a64(t.mdp_id.as_bytes()) % 5 == 0);
    }

    let split = |held: bool| -> (Array2<f64>, Array2<f64>) {
        let rows: Vec<usize> = (0..usable.len()).filter(|&r| in_held[r] == held).collect();
        let mut xi = Array2::zeros((rows.len(), width));
        let mut yi = Array2::zeros((rows.len(), target_dim));
        for (out_r, &r) in rows.iter().enumerate() {
            xi.row_mut(out_r).assign(&inputs.row(r));
            yi.row_mut(out_r).assign(&targets.row(r));
        }
        (xi, yi)
    };
    let (held_inputs, held_targets) = split(true);
    let (train_inputs, train_targets) = split(false);
    if train_inputs.nrows() == 0 || held_inputs.nrows() == 0 {
        return Err(UnderstandError::NoData);
    }

    let mut input_groups: Vec<(String, usize, usize)> = preprocessor
        .layout()
        .iter()
        .map(|(id, (offset, w))| (id.clone(), *offset, *w))
        .collect();
    input_groups.extend(encoder.groups(state_width));

    Ok(EncodedData {
        train_inputs,
        train_targets,
        held_inputs,
        held_targets,
        input_groups,
        target_labels,
        state_width,
    })
}

/// Fit the mixture-density model by Adam on the mixture NLL.
pub fn fit_env_model(
    data: &EncodedData,
    target: FitTarget,
    cfg: &EnvModelConfig,
) -> Result<EnvModel, UnderstandError> {
    let k = cfg.mixture_components;
    let target_dim = data.train_targets.ncols();
    let input_width = data.train_inputs.ncols();
    let mut widths = vec![input_width];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(GmmHeadOutput::raw_width(k, target_dim));
    let spec = MlpSpec::new(widths, Activation::Relu, cfg.seed);
    let params = spec.init_params();

    let input_means: Vec<f64> = data
        .train_inputs
        .mean_axis(Axis(0))
        .expect("non-empty")
        .to_vec();

    let mut model = EnvModel {
        spec,
        params,
        mixture_components: k,
        target_dim,
        target,
        input_means,
        input_groups: data.input_groups.clone(),
        target_labels: data.target_labels.clone(),
        held_out_nll: 0.0,
        initial_held_out_nll: 0.0,
    };
    model.initial_held_out_nll = model.mean_nll(&data.held_inputs, &data.held_targets);

    let n = data.train_inputs.nrows();
    let mut opt = AdamState::new(cfg.learning_rate, model.params.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch_in = Array2::zeros((chunk.len(), input_width));
            let mut batch_tg = Array2::zeros((chunk.len(), target_dim));
            for (r, &idx) in chunk.iter().enumerate() {
                batch_in.row_mut(r).assign(&data.train_inputs.row(idx));
                batch_tg.row_mut(r).assign(&data.train_targets.row(idx));
            }
            let fwd = mlp_forward(&model.spec, &model.params, &batch_in).expect("shape");
            let out = fwd.output();
            let mut upstream = Array2::zeros(out.dim());
            for r in 0..chunk.len() {
                let (_, grad) = gmm_nll_grad(
                    out.row(r).as_slice().unwrap(),
                    k,
                    target_dim,
                    batch_tg.row(r).as_slice().unwrap(),
                );
                for (c, g) in grad.iter().enumerate() {
                    upstream[[r, c]] = g / chunk.len() as f64;
                }
            }
            let (grads, _) =
                mlp_backward(&model.spec, &model.params, &fwd, &upstream).expect("shape");
            adam_step(&mut model.params, &grads, &mut opt);
        }
    }

    model.held_out_nll = model.mean_nll(&data.held_inputs, &data.held_targets);
    if !model.converged() {
        log::warn!(
            "environment model did not improve on held-out data (init {:.4}, final {:.4})",
            model.initial_held_out_nll,
            model.held_out_nll
        );
    }
    Ok(model)
}

/// Held-out loss increase per input feature group when the group is masked
/// to its training mean.
pub fn feature_importance(model: &EnvModel, data: &EncodedData) -> BTreeMap<String, f64> {
    let base = model.mean_nll(&data.held_inputs, &data.held_targets);
    let jobs: Vec<(String, usize, usize)> = model.input_groups.clone();
    let results = threads::ordered_map(jobs, |(name, offset, width)| {
        let mut masked = data.held_inputs.clone();
        for r in 0..masked.nrows() {
            for c in offset..offset + width {
                masked[[r, c]] = model.input_means[c];
            }
        }
        (name, model.mean_nll(&masked, &data.held_targets) - base)
    });
    results.into_iter().collect()
}

/// How much the next-state prediction of each state feature moves when the
/// action is varied, normalized by the feature's observed spread. Only
/// meaningful on a next-state model with a discrete action encoding.
pub fn action_dependence(
    model: &EnvModel,
    data: &EncodedData,
    encoder: &ActionEncoder,
) -> Result<BTreeMap<String, f64>, UnderstandError> {
    let num_actions = encoder
        .num_discrete_actions()
        .ok_or(UnderstandError::ContinuousActions)?;
    assert!(
        matches!(model.target, FitTarget::NextState),
        "action dependence needs the next-state model"
    );
    let rows = data.held_inputs.nrows();
    let dim = model.target_dim;

    // Predicted means under every action for every held-out state.
    let mut spans = Array2::from_elem((rows, dim), (f64::INFINITY, f64::NEG_INFINITY));
    for a in 0..num_actions {
        let mut inputs = data.held_inputs.clone();
        for r in 0..rows {
            for c in data.state_width..inputs.ncols() {
                inputs[[r, c]] = 0.0;
            }
            inputs[[r, data.state_width + a]] = 1.0;
        }
        let means = model.predict_means(&inputs);
        for r in 0..rows {
            for d in 0..dim {
                let (lo, hi) = spans[[r, d]];
                spans[[r, d]] = (lo.min(means[[r, d]]), hi.max(means[[r, d]]));
            }
        }
    }

    // Spread per target column, averaged over rows, scaled by column stddev.
    let mut out = BTreeMap::new();
    for d in 0..dim {
        let mean_span: f64 = (0..rows)
            .map(|r| {
                let (lo, hi) = spans[[r, d]];
                hi - lo
            })
            .sum::<f64>()
            / rows.max(1) as f64;
        let col: Vec<f64> = data.train_targets.column(d).to_vec();
        let stddev = crate::stats::sample_stddev(&col).max(1e-6);
        let label = model.target_labels[d].clone();
        // collapse multi-column features (enums) by keeping the largest span
        let entry = out.entry(base_feature_name(&label)).or_insert(0.0);
        *entry = f64::max(*entry, mean_span / stddev);
    }
    Ok(out)
}

fn base_feature_name(label: &str) -> String {
    match label.find('[') {
        Some(pos) => label[..pos].to_string(),
        None => label.to_string(),
    }
}

/// Verdict thresholds, surfaced in the report so humans can re-judge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckThresholds {
    /// Minimum transition importance of the action group (nats).
    pub action_importance: f64,
    /// Minimum transition importance of some state feature (nats).
    pub state_importance: f64,
    /// Minimum reward-model importance of a linking state feature (nats).
    pub reward_importance: f64,
    /// Minimum stddev-normalized action dependence of a linking feature.
    pub dependence: f64,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        CheckThresholds {
            action_importance: 0.01,
            state_importance: 0.01,
            reward_importance: 0.01,
            dependence: 0.1,
        }
    }
}

/// Scores, verdicts and explanations for the two formulation checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataHealthReport {
    pub transition_importance: BTreeMap<String, f64>,
    pub reward_importance: BTreeMap<String, f64>,
    pub action_dependence: BTreeMap<String, f64>,
    pub transitions_predictable: bool,
    pub reward_state_action_link: bool,
    pub explanations: Vec<String>,
    pub thresholds: CheckThresholds,
    pub next_state_model_held_out_nll: f64,
    pub reward_model_held_out_nll: f64,
    pub next_state_model_converged: bool,
    pub reward_model_converged: bool,
}

fn is_action_group(name: &str) -> bool {
    name == "action" || name.starts_with("action/")
}

/// Run both formulation checks from the fitted models' scores. Pure function
/// of (scores, thresholds); always produces a report.
pub fn run_checks(
    transition_importance: BTreeMap<String, f64>,
    reward_importance: BTreeMap<String, f64>,
    dependence: BTreeMap<String, f64>,
    thresholds: CheckThresholds,
    next_state_model: (&EnvModel, &EnvModel),
) -> DataHealthReport {
    let mut explanations = Vec::new();

    let action_hit = transition_importance
        .iter()
        .filter(|(name, _)| is_action_group(name))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let state_hit = transition_importance
        .iter()
        .filter(|(name, _)| !is_action_group(name))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let action_ok = action_hit > thresholds.action_importance;
    let state_ok = state_hit > thresholds.state_importance;
    let transitions_predictable = action_ok && state_ok;
    if !action_ok {
        explanations.push(format!(
            "no action input moves the next-state model (max importance {action_hit:.4} nats <= {}); actions may not influence transitions",
            thresholds.action_importance
        ));
    }
    if !state_ok {
        explanations.push(format!(
            "no state feature helps predict the next state (max importance {state_hit:.4} nats <= {}); the problem has no sequential structure",
            thresholds.state_importance
        ));
    }

    let mut link_feature = None;
    for (name, &dep) in &dependence {
        if dep > thresholds.dependence {
            if let Some(&imp) = reward_importance.get(name) {
                if imp > thresholds.reward_importance {
                    link_feature = Some((name.clone(), dep, imp));
                    break;
                }
            }
        }
    }
    let reward_state_action_link = link_feature.is_some();
    match &link_feature {
        Some((name, dep, imp)) => explanations.push(format!(
            "state feature {name} links actions to rewards (dependence {dep:.3}, reward importance {imp:.4} nats)"
        )),
        None => explanations.push(
            "no state feature is both moved by actions and predictive of rewards; the problem reduces to a multi-arm bandit"
                .to_string(),
        ),
    }

    DataHealthReport {
        transition_importance,
        reward_importance,
        action_dependence: dependence,
        transitions_predictable,
        reward_state_action_link,
        explanations,
        thresholds,
        next_state_model_held_out_nll: next_state_model.0.held_out_nll,
        reward_model_held_out_nll: next_state_model.1.held_out_nll,
        next_state_model_converged: next_state_model.0.converged(),
        reward_model_converged: next_state_model.1.converged(),
    }
}

/// Full pipeline: fit next-state and reward models separately, score feature
/// importances and action dependence, and produce the health report.
pub fn understand(
    transitions: &[JoinedTransition],
    preprocessor: &Preprocessor,
    reward_of: &dyn Fn(&JoinedTransition) -> f64,
    cfg: &EnvModelConfig,
    thresholds: CheckThresholds,
) -> Result<DataHealthReport, UnderstandError> {
    let encoder = ActionEncoder::from_transitions(transitions)?;
    let next_data = encode_dataset(transitions, preprocessor, &encoder, FitTarget::NextState, reward_of)?;
    let next_model = fit_env_model(&next_data, FitTarget::NextState, cfg)?;
    let mut reward_cfg = cfg.clone();
    reward_cfg.seed = cfg.seed.wrapping_add(1);
    let reward_data = encode_dataset(transitions, preprocessor, &encoder, FitTarget::Reward, reward_of)?;
    let reward_model = fit_env_model(&reward_data, FitTarget::Reward, &reward_cfg)?;

    let transition_importance = feature_importance(&next_model, &next_data);
    let reward_importance = feature_importance(&reward_model, &reward_data);
    let dependence = action_dependence(&next_model, &next_data, &encoder)?;
    Ok(run_checks(
        transition_importance,
        reward_importance,
        dependence,
        thresholds,
        (&next_model, &reward_model),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::{fit_spec, FeatureKind, FitConfig};
    use rand::Rng;

    /// Synthetic generator in already-normalized space: s0' = s0 + effect(a)
    /// plus noise; s1 is action-independent (pure noise, or a deterministic
    /// carry-over when `s1_carryover` is set); reward depends on s0 and the
    /// action.
    fn synthetic(
        n: usize,
        seed: u64,
        action_effect: f64,
        reward_uses_state: bool,
        s1_carryover: bool,
    ) -> Vec<JoinedTransition> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for ep in 0..n {
            let s0: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let s1: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let a = usize::from(rng.random::<f64>() < 0.5);
            let effect = if a == 1 { action_effect } else { -action_effect };
            let noise: f64 = (rng.random::<f64>() - 0.5) * 0.1;
            let next_s0 = s0 + effect + noise;
            let next_s1: f64 = if s1_carryover {
                0.8 * s1
            } else {
                rng.random::<f64>() * 2.0 - 1.0
            };
            let reward = if reward_uses_state { s0 * effect } else { effect };
            let features = |x0: f64, x1: f64| {
                BTreeMap::from([("s0".to_string(), x0), ("s1".to_string(), x1)])
            };
            out.push(JoinedTransition {
                mdp_id: format!("m{ep}"),
                sequence_number: 0,
                state_features: features(s0, s1),
                action: ActionValue::Discrete(if a == 1 { "up" } else { "down" }.to_string()),
                action_probability: 0.5,
                metrics: BTreeMap::from([("reward".to_string(), reward)]),
                possible_actions: Some(vec![
                    ActionValue::Discrete("down".to_string()),
                    ActionValue::Discrete("up".to_string()),
                ]),
                next_state_features: Some(features(next_s0, next_s1)),
                next_action: None,
                sequence_number_ordinal: 1,
                time_diff: 1,
                possible_next_actions: None,
                terminal: false,
            });
        }
        out
    }

    fn identity_preprocessor(ids: &[&str]) -> Preprocessor {
        // continuous transforms fitted on a wide symmetric sample: mean ~0,
        // stddev ~1, so values pass through roughly unchanged
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let sample: Vec<f64> = (0..4000).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let specs = ids
            .iter()
            .map(|id| fit_spec(id, &sample, FeatureKind::Continuous, &FitConfig::default()))
            .collect();
        Preprocessor::build(specs).unwrap()
    }

    #[test]
    fn masking_a_feature_already_at_its_mean_changes_nothing() {
        let transitions = synthetic(300, 1, 0.5, true, false);
        let pre = identity_preprocessor(&["s0", "s1"]);
        let encoder = ActionEncoder::from_transitions(&transitions).unwrap();
        let mut data = encode_dataset(
            &transitions,
            &pre,
            &encoder,
            FitTarget::NextState,
            &|t| t.metrics["reward"],
        )
        .unwrap();
        // force column of s1 to a constant in train and held inputs
        let (offset, _) = pre.layout()["s1"];
        for r in 0..data.train_inputs.nrows() {
            data.train_inputs[[r, offset]] = 0.25;
        }
        for r in 0..data.held_inputs.nrows() {
            data.held_inputs[[r, offset]] = 0.25;
        }
        let cfg = EnvModelConfig {
            epochs: 2,
            hidden: vec![8],
            mixture_components: 1,
            ..EnvModelConfig::default()
        };
        let model = fit_env_model(&data, FitTarget::NextState, &cfg).unwrap();
        let importance = feature_importance(&model, &data);
        assert_eq!(importance["s1"], 0.0);
    }

    #[test]
    fn signal_feature_dominates_noise_feature() {
        let transitions = synthetic(2500, 2, 0.6, true, false);
        let pre = identity_preprocessor(&["s0", "s1"]);
        let encoder = ActionEncoder::from_transitions(&transitions).unwrap();
        let data = encode_dataset(
            &transitions,
            &pre,
            &encoder,
            FitTarget::NextState,
            &|t| t.metrics["reward"],
        )
        .unwrap();
        let cfg = EnvModelConfig {
            epochs: 25,
            hidden: vec![24],
            mixture_components: 1,
            seed: 5,
            ..EnvModelConfig::default()
        };
        let model = fit_env_model(&data, FitTarget::NextState, &cfg).unwrap();
        assert!(model.converged());
        let importance = feature_importance(&model, &data);
        assert!(
            importance["s0"] >= 5.0 * importance["s1"].max(0.0),
            "importances: {importance:?}"
        );
        assert!(importance["action"] > 0.01, "importances: {importance:?}");
    }

    #[test]
    fn dependence_high_for_action_driven_feature_only() {
        let transitions = synthetic(3000, 3, 0.6, true, true);
        let pre = identity_preprocessor(&["s0", "s1"]);
        let encoder = ActionEncoder::from_transitions(&transitions).unwrap();
        let data = encode_dataset(
            &transitions,
            &pre,
            &encoder,
            FitTarget::NextState,
            &|t| t.metrics["reward"],
        )
        .unwrap();
        let cfg = EnvModelConfig {
            epochs: 120,
            hidden: vec![32],
            mixture_components: 1,
            learning_rate: 2e-3,
            seed: 6,
            ..EnvModelConfig::default()
        };
        let model = fit_env_model(&data, FitTarget::NextState, &cfg).unwrap();
        let dep = action_dependence(&model, &data, &encoder).unwrap();
        assert!(dep["s0"] > 0.5, "dependence: {dep:?}");
        assert!(dep["s1"] < 0.1, "dependence: {dep:?}");
    }

    #[test]
    fn single_action_means_zero_dependence() {
        let mut transitions = synthetic(400, 4, 0.5, true, true);
        for t in &mut transitions {
            t.action = ActionValue::Discrete("only".to_string());
            t.possible_actions = Some(vec![ActionValue::Discrete("only".to_string())]);
        }
        let pre = identity_preprocessor(&["s0", "s1"]);
        let encoder = ActionEncoder::from_transitions(&transitions).unwrap();
        let data = encode_dataset(
            &transitions,
            &pre,
            &encoder,
            FitTarget::NextState,
            &|t| t.metrics["reward"],
        )
        .unwrap();
        let cfg = EnvModelConfig {
            epochs: 2,
            hidden: vec![8],
            mixture_components: 1,
            ..EnvModelConfig::default()
        };
        let model = fit_env_model(&data, FitTarget::NextState, &cfg).unwrap();
        let dep = action_dependence(&model, &data, &encoder).unwrap();
        assert!(dep.values().all(|&v| v == 0.0), "dependence: {dep:?}");
    }

    #[test]
    fn verdicts_are_pure_functions_of_scores() {
        let transitions = synthetic(300, 7, 0.5, true, false);
        let pre = identity_preprocessor(&["s0", "s1"]);
        let encoder = ActionEncoder::from_transitions(&transitions).unwrap();
        let data = encode_dataset(&transitions, &pre, &encoder, FitTarget::NextState, &|t| {
            t.metrics["reward"]
        })
        .unwrap();
        let cfg = EnvModelConfig {
            epochs: 2,
            hidden: vec![8],
            mixture_components: 1,
            ..EnvModelConfig::default()
        };
        let model = fit_env_model(&data, FitTarget::NextState, &cfg).unwrap();

        let ti = BTreeMap::from([
            ("action".to_string(), 0.2),
            ("s0".to_string(), 0.15),
            ("s1".to_string(), 0.0),
        ]);
        let ri = BTreeMap::from([("s0".to_string(), 0.1)]);
        let dep = BTreeMap::from([("s0".to_string(), 0.9), ("s1".to_string(), 0.0)]);
        let a = run_checks(
            ti.clone(),
            ri.clone(),
            dep.clone(),
            CheckThresholds::default(),
            (&model, &model),
        );
        let b = run_checks(ti, ri, dep, CheckThresholds::default(), (&model, &model));
        assert_eq!(a.transitions_predictable, b.transitions_predictable);
        assert!(a.transitions_predictable);
        assert!(a.reward_state_action_link);

        // thresholds flip verdicts deterministically
        let strict = CheckThresholds {
            state_importance: 1.0,
            ..CheckThresholds::default()
        };
        let c = run_checks(
            b.transition_importance.clone(),
            b.reward_importance.clone(),
            b.action_dependence.clone(),
            strict,
            (&model, &model),
        );
        assert!(!c.transitions_predictable);
    }

    #[test]
    fn continuous_actions_rejected_with_guidance() {
        let mut transitions = synthetic(50, 8, 0.5, true, false);
        for t in &mut transitions {
            t.action = ActionValue::Parametric(BTreeMap::from([("force".to_string(), 0.1)]));
            t.possible_actions = None;
        }
        let err = ActionEncoder::from_transitions(&transitions).unwrap_err();
        assert!(err.to_string().contains("sampled-action"));
    }
}
