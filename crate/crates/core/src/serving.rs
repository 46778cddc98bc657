//! Serving: load a checkpoint, score states, and emit decisions with full
//! propensity maps in the same row schema the training pipeline ingests, so
//! served traffic can be reward-joined and fed straight back in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::normalization::Preprocessor;
use crate::rl::{
    parametric_q, select_action, threshold_policy, PidController, PolicyDecision, PolicyMode,
    QNetwork, RlError,
};
use crate::timeline::{ActionValue, RawRow};
use crate::trainer::{Algorithm, ContinuousModel, ModelCheckpoint, TrainError};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("request has no possible actions")]
    NoPossibleActions,
    #[error("action {0} is not in the checkpoint's action set")]
    UnknownAction(String),
    #[error("threshold policy needs exactly two possible actions, got {0}")]
    ThresholdNeedsTwo(usize),
    #[error("{0} checkpoints cannot serve {1} requests")]
    WrongModelKind(&'static str, &'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] TrainError),
    #[error("{0}")]
    Rl(#[from] RlError),
}

/// Serving policy for a scorer instance.
#[derive(Debug, Clone)]
pub enum ServingPolicy {
    Mode(PolicyMode),
    /// Send/drop decision via sigmoid(Q(send) - Q(drop)) against a PID-tuned
    /// threshold.
    Threshold(PidController),
}

/// One scoring request. `mdp_id`/`sequence_number` are carried through into
/// the emitted row stub so the reward join can key on them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringRequest {
    #[serde(default)]
    pub mdp_id: Option<String>,
    #[serde(default)]
    pub sequence_number: Option<i64>,
    pub state_features: BTreeMap<String, f64>,
    #[serde(default)]
    pub possible_actions: Option<Vec<ActionValue>>,
}

/// Decision plus logging metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub sample_key: String,
    pub model_digest: String,
    pub action: ActionValue,
    pub action_probability: f64,
    pub possible_actions: Vec<ActionValue>,
    pub propensities: Vec<f64>,
    pub q_values: Vec<f64>,
}

impl ScoringResponse {
    /// Rewrite as an ingestion row awaiting its reward join. Metrics are
    /// left empty; the joiner fills them in.
    pub fn as_raw_row(&self, request: &ScoringRequest, counter: u64) -> RawRow {
        RawRow {
            mdp_id: request
                .mdp_id
                .clone()
                .unwrap_or_else(|| format!("serve-{}", self.sample_key)),
            sequence_number: request.sequence_number.unwrap_or(counter as i64),
            state_features: request.state_features.clone(),
            action: self.action.clone(),
            action_probability: self.action_probability,
            metrics: BTreeMap::new(),
            possible_actions: Some(self.possible_actions.clone()),
            terminal: false,
        }
    }
}

/// A loaded model ready to score requests. Checkpoint contents are immutable
/// after load; the PID controller is the only mutable piece.
pub struct Scorer {
    algorithm: Algorithm,
    actions: Vec<String>,
    action_ids: Vec<String>,
    preprocessor: Preprocessor,
    action_preprocessor: Option<Preprocessor>,
    discrete: Option<QNetwork>,
    continuous: Option<ContinuousModel>,
    pub policy: ServingPolicy,
    digest: String,
    run_key: String,
    counter: u64,
    rng: ChaCha20Rng,
}

impl Scorer {
    pub fn new(ckpt: &ModelCheckpoint, policy: ServingPolicy, seed: u64) -> Result<Scorer, ServeError> {
        let preprocessor = Preprocessor::build(ckpt.normalization_specs())
            .map_err(|e| ServeError::Checkpoint(TrainError::Normalization(e)))?;
        let action_preprocessor = if ckpt.algorithm == Algorithm::ParametricDqn {
            Some(
                Preprocessor::build(ckpt.action_normalization_specs())
                    .map_err(|e| ServeError::Checkpoint(TrainError::Normalization(e)))?,
            )
        } else {
            None
        };
        let (discrete, continuous) = match ckpt.algorithm {
            Algorithm::Dqn | Algorithm::ParametricDqn => (Some(ckpt.online_network()?), None),
            Algorithm::Ddpg | Algorithm::Sac => (None, Some(ckpt.restore_continuous()?)),
        };
        Ok(Scorer {
            algorithm: ckpt.algorithm,
            actions: ckpt.actions.clone(),
            action_ids: ckpt.action_feature_ids.clone(),
            preprocessor,
            action_preprocessor,
            discrete,
            continuous,
            policy,
            digest: ckpt.norm_digest.clone(),
            run_key: Uuid::new_v4().to_string(),
            counter: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    fn next_sample_key(&mut self) -> String {
        self.counter += 1;
        format!("{}-{}", self.run_key, self.counter)
    }

    /// Q-values for the request's possible actions (discrete/parametric).
    fn q_values(
        &self,
        state: &BTreeMap<String, f64>,
        possible: &[ActionValue],
    ) -> Result<Vec<f64>, ServeError> {
        match self.algorithm {
            Algorithm::Dqn => {
                let net = self.discrete.as_ref().expect("discrete checkpoint");
                let input = crate::trainer::preprocess_row(&self.preprocessor, state);
                let q_all = net.q_values(&input)?;
                possible
                    .iter()
                    .map(|a| {
                        let name = a
                            .as_discrete()
                            .ok_or_else(|| ServeError::UnknownAction(format!("{a:?}")))?;
                        let idx = self
                            .actions
                            .binary_search_by(|x| x.as_str().cmp(name))
                            .map_err(|_| ServeError::UnknownAction(name.to_string()))?;
                        Ok(q_all[[0, idx]])
                    })
                    .collect()
            }
            Algorithm::ParametricDqn => {
                let net = self.discrete.as_ref().expect("parametric checkpoint");
                let pre = self.action_preprocessor.as_ref().expect("parametric specs");
                let state_vec = self.preprocessor.transform_row(state);
                let candidates: Result<Vec<Vec<f64>>, ServeError> = possible
                    .iter()
                    .map(|a| {
                        a.as_parametric()
                            .map(|f| pre.transform_row(f))
                            .ok_or_else(|| ServeError::UnknownAction(format!("{a:?}")))
                    })
                    .collect();
                Ok(parametric_q(net, &state_vec, &candidates?)?)
            }
            _ => Err(ServeError::WrongModelKind("continuous", "discrete-action")),
        }
    }

    /// Score one request.
    pub fn score(&mut self, request: &ScoringRequest) -> Result<ScoringResponse, ServeError> {
        let sample_key = self.next_sample_key();
        match self.algorithm {
            Algorithm::Ddpg | Algorithm::Sac => {
                let model = self.continuous.as_ref().expect("continuous checkpoint");
                let input =
                    crate::trainer::preprocess_row(&self.preprocessor, &request.state_features);
                let action_row = match model {
                    ContinuousModel::Ddpg(m) => m.act(&input)?,
                    ContinuousModel::Sac(m) => m.act_mean(&input)?,
                };
                let ids = self.continuous_action_ids();
                let mut features = BTreeMap::new();
                for (i, id) in ids.iter().enumerate() {
                    features.insert(id.clone(), action_row[[0, i]]);
                }
                let action = ActionValue::Parametric(features);
                Ok(ScoringResponse {
                    sample_key,
                    model_digest: self.digest.clone(),
                    action: action.clone(),
                    action_probability: 1.0, // deterministic actor
                    possible_actions: vec![action],
                    propensities: vec![1.0],
                    q_values: Vec::new(),
                })
            }
            _ => {
                let possible = request
                    .possible_actions
                    .clone()
                    .or_else(|| {
                        if self.algorithm == Algorithm::Dqn {
                            Some(
                                self.actions
                                    .iter()
                                    .map(|n| ActionValue::Discrete(n.clone()))
                                    .collect(),
                            )
                        } else {
                            None
                        }
                    })
                    .filter(|v| !v.is_empty())
                    .ok_or(ServeError::NoPossibleActions)?;
                let q = self.q_values(&request.state_features, &possible)?;
                let decision = match &self.policy {
                    ServingPolicy::Mode(mode) => select_action(&q, *mode, &mut self.rng),
                    ServingPolicy::Threshold(pid) => {
                        threshold_decision(&possible, &q, pid.threshold)?
                    }
                };
                Ok(ScoringResponse {
                    sample_key,
                    model_digest: self.digest.clone(),
                    action: possible[decision.action_index].clone(),
                    action_probability: decision.propensity,
                    possible_actions: possible,
                    propensities: decision.propensities,
                    q_values: q,
                })
            }
        }
    }

    fn continuous_action_ids(&self) -> Vec<String> {
        self.action_ids.clone()
    }

    /// Observed-rate feedback for threshold serving.
    pub fn pid_update(&mut self, observed_send_rate: f64) {
        if let ServingPolicy::Threshold(pid) = &mut self.policy {
            pid.update(observed_send_rate);
        }
    }
}

/// Send/drop by threshold. The send-like action is the one named "send" if
/// present, else the first listed.
fn threshold_decision(
    possible: &[ActionValue],
    q: &[f64],
    threshold: f64,
) -> Result<PolicyDecision, ServeError> {
    if possible.len() != 2 {
        return Err(ServeError::ThresholdNeedsTwo(possible.len()));
    }
    let send_idx = possible
        .iter()
        .position(|a| a.as_discrete() == Some("send"))
        .unwrap_or(0);
    let drop_idx = 1 - send_idx;
    let send = threshold_policy(q[send_idx], q[drop_idx], threshold);
    let chosen = if send { send_idx } else { drop_idx };
    let mut propensities = vec![0.0; 2];
    propensities[chosen] = 1.0;
    Ok(PolicyDecision {
        action_index: chosen,
        propensity: 1.0,
        propensities,
    })
}

/// Batch scoring over request rows; per-line failures are reported and the
/// rest of the file still processes. Returns (responses, row stubs, errors).
pub fn batch_score(
    scorer: &mut Scorer,
    requests: &[ScoringRequest],
    pid_window: usize,
) -> (Vec<ScoringResponse>, Vec<RawRow>, Vec<(usize, String)>) {
    let mut responses = Vec::with_capacity(requests.len());
    let mut rows = Vec::with_capacity(requests.len());
    let mut errors = Vec::new();
    let mut window_sends = 0usize;
    let mut window_count = 0usize;
    for (i, request) in requests.iter().enumerate() {
        match scorer.score(request) {
            Ok(response) => {
                if let ServingPolicy::Threshold(_) = &scorer.policy {
                    if response.action.as_discrete() == Some("send")
                        || response
                            .possible_actions
                            .first()
                            .map(|a| *a == response.action)
                            .unwrap_or(false)
                    {
                        window_sends += 1;
                    }
                    window_count += 1;
                    if window_count >= pid_window.max(1) {
                        scorer.pid_update(window_sends as f64 / window_count as f64);
                        window_sends = 0;
                        window_count = 0;
                    }
                }
                rows.push(response.as_raw_row(request, i as u64));
                responses.push(response);
            }
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    (responses, rows, errors)
}
