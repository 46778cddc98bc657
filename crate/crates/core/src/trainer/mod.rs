//! Training orchestration: shuffle minibatches, run the algorithm's update
//! step, track TD/MC losses, collect evaluation samples during the epoch,
//! run the counterfactual estimators at epoch end, and checkpoint with warm
//! start.

mod checkpoint;
mod dataset;
mod metrics;

pub use checkpoint::{digest_specs, ContinuousModel, ModelCheckpoint, NetworkBlob, OptimizerBlob};
pub use dataset::{ContinuousDataset, DiscreteDataset};
pub use metrics::{metrics_csv, metrics_json, EpochMetrics};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpe::{collect_and_sort, cpe_report, CpeConfig, CpeError, EvalStep};
use crate::neural::{Activation, AdamState};
use crate::normalization::{NormalizationError, NormalizationSpec, Preprocessor};
use crate::rl::{
    ddpg_step, dqn_train_step, parametric_train_step, policy_propensities, sac_step,
    ContinuousBatch, Ddpg, DdpgConfig, DqnBatch, DqnConfig, LossKind, ParametricBatch, PolicyMode,
    QNetwork, RlError, Sac, SacConfig, TargetUpdate,
};
use crate::stats::derive_seed;
use crate::timeline::{JoinedTransition, RewardWeights, TimelineError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Timeline(#[from] TimelineError),
    #[error("{0}")]
    Normalization(#[from] NormalizationError),
    #[error("{0}")]
    Rl(#[from] RlError),
    #[error("{0}")]
    Cpe(#[from] CpeError),
    #[error("no transitions in the training input")]
    EmptyDataset,
    #[error("dataset has no {0} actions but the config requests a {1} algorithm")]
    ActionKindMismatch(&'static str, &'static str),
    #[error("checkpoint is for algorithm {ckpt:?} but the config requests {cfg:?}")]
    AlgorithmMismatch { ckpt: Algorithm, cfg: Algorithm },
    #[error("checkpoint normalization digest {ckpt} does not match the provided specs ({given})")]
    NormalizationDigestMismatch { ckpt: String, given: String },
    #[error("training aborted: non-finite loss at epoch {epoch}{diagnostics}; last good checkpoint retained")]
    NonFiniteLoss { epoch: u32, diagnostics: String },
    #[error("metrics write failed: {0}")]
    Io(#[from] crate::io::IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dqn,
    ParametricDqn,
    Ddpg,
    Sac,
}

/// Counterfactual-evaluation settings inside training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpeSettings {
    pub enabled: bool,
    /// Target policy whose propensities the estimators score.
    pub target_policy: PolicyMode,
    #[serde(flatten)]
    pub config: CpeConfig,
}

impl Default for CpeSettings {
    fn default() -> Self {
        CpeSettings {
            enabled: true,
            target_policy: PolicyMode::Epsilon { epsilon: 0.1 },
            config: CpeConfig::default(),
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> u32 {
    20
}
fn default_eval_fraction() -> f64 {
    0.2
}
fn default_multi_step() -> usize {
    1
}
fn default_sac_alpha() -> f64 {
    0.2
}
fn default_gamma() -> f64 {
    0.99
}
fn default_true() -> bool {
    true
}

/// Whole-run configuration, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub double_q: bool,
    #[serde(default)]
    pub dueling: bool,
    #[serde(default = "default_multi_step")]
    pub multi_step: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default)]
    pub sarsa: bool,
    #[serde(default)]
    pub use_time_diff_discount: bool,
    #[serde(default = "TrainConfig::default_target_update")]
    pub target_update: TargetUpdate,
    #[serde(default = "TrainConfig::default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Hidden-layer activation for all networks.
    #[serde(default = "TrainConfig::default_activation")]
    pub activation: Activation,
    /// Explicit discrete action set; derived from the data when absent.
    #[serde(default)]
    pub actions: Option<Vec<String>>,
    #[serde(default = "RewardWeights::reward_only")]
    pub reward_weights: RewardWeights,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub cpe: CpeSettings,
    /// Serving-side exploration default, stored into the checkpoint.
    #[serde(default = "TrainConfig::default_exploration")]
    pub exploration: PolicyMode,
    #[serde(default = "default_sac_alpha")]
    pub sac_alpha: f64,
    /// PID gains for threshold serving: (kp, ki, kd, target_rate).
    #[serde(default)]
    pub pid: Option<(f64, f64, f64, f64)>,
    /// Actor learning rate for the actor-critic algorithms; defaults to a
    /// tenth of the critic rate for DDPG and the critic rate for SAC.
    #[serde(default)]
    pub actor_learning_rate: Option<f64>,
}

impl TrainConfig {
    fn default_target_update() -> TargetUpdate {
        TargetUpdate::Hard { every: 100 }
    }
    fn default_loss() -> LossKind {
        LossKind::Mse
    }
    fn default_activation() -> Activation {
        Activation::Relu
    }
    fn default_exploration() -> PolicyMode {
        PolicyMode::Greedy
    }

    pub fn dqn(&self) -> DqnConfig {
        DqnConfig {
            gamma: self.gamma,
            double_q: self.double_q,
            dueling: self.dueling,
            multi_step: self.multi_step,
            target_update: self.target_update,
            loss: self.loss,
            sarsa: self.sarsa,
            use_time_diff_discount: self.use_time_diff_discount,
        }
    }

    fn polyak_tau(&self) -> f64 {
        match self.target_update {
            TargetUpdate::Polyak { tau } => tau,
            TargetUpdate::Hard { .. } => 0.005,
        }
    }

    pub fn ddpg(&self) -> DdpgConfig {
        DdpgConfig {
            gamma: self.gamma,
            tau: self.polyak_tau(),
            actor_lr: self.actor_learning_rate.unwrap_or(self.learning_rate / 10.0),
            critic_lr: self.learning_rate,
        }
    }

    pub fn sac(&self) -> SacConfig {
        SacConfig {
            gamma: self.gamma,
            tau: self.polyak_tau(),
            alpha: self.sac_alpha,
            actor_lr: self.actor_learning_rate.unwrap_or(self.learning_rate),
            critic_lr: self.learning_rate,
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochMetrics>,
}

/// Train a model from joined transitions and fitted normalization specs.
///
/// `resume` warm-starts from a checkpoint: network weights, optimizer state
/// and the epoch counter continue exactly where they left off, and with the
/// same seed the result is bit-identical to an uninterrupted run. Metric
/// files (`metrics.csv`, `metrics.json`) and `checkpoint.json` are written
/// under `out_dir` after every epoch when it is given.
pub fn train(
    config: &TrainConfig,
    transitions: &[JoinedTransition],
    norm_specs: Vec<NormalizationSpec>,
    seed: u64,
    resume: Option<ModelCheckpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if transitions.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(ckpt) = &resume {
        if ckpt.algorithm != config.algorithm {
            return Err(TrainError::AlgorithmMismatch {
                ckpt: ckpt.algorithm,
                cfg: config.algorithm,
            });
        }
    }
    match config.algorithm {
        Algorithm::Dqn | Algorithm::ParametricDqn => {
            train_discrete(config, transitions, norm_specs, seed, resume, out_dir)
        }
        Algorithm::Ddpg | Algorithm::Sac => {
            train_continuous(config, transitions, norm_specs, seed, resume, out_dir)
        }
    }
}

enum DiscreteModel {
    Direct {
        online: QNetwork,
        target: QNetwork,
        opt: AdamState,
    },
    Parametric {
        online: QNetwork,
        target: QNetwork,
        opt: AdamState,
    },
}

fn train_discrete(
    config: &TrainConfig,
    transitions: &[JoinedTransition],
    norm_specs: Vec<NormalizationSpec>,
    seed: u64,
    resume: Option<ModelCheckpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let parametric = config.algorithm == Algorithm::ParametricDqn;
    let ds = DiscreteDataset::build(transitions, norm_specs.clone(), config, parametric)?;
    let run_seed = resume.as_ref().map(|c| c.run_seed).unwrap_or(seed);
    let start_epoch = resume.as_ref().map(|c| c.epochs_completed).unwrap_or(0);

    let norm_digest = checkpoint::digest_specs(&norm_specs, &ds.action_norm_specs);
    if let Some(ckpt) = &resume {
        if ckpt.norm_digest != norm_digest {
            return Err(TrainError::NormalizationDigestMismatch {
                ckpt: ckpt.norm_digest.clone(),
                given: norm_digest,
            });
        }
    }

    let mut model = match &resume {
        Some(ckpt) => ckpt.restore_discrete()?,
        None => {
            let hidden = &config.hidden;
            if parametric {
                let online = QNetwork::new_parametric_with(
                    ds.state_width + ds.action_width,
                    hidden,
                    config.activation,
                    derive_seed(run_seed, 0),
                );
                let target = online.clone();
                let opt = AdamState::new(config.learning_rate, online.params.len());
                DiscreteModel::Parametric { online, target, opt }
            } else {
                let online = QNetwork::new_discrete_with(
                    ds.state_width,
                    hidden,
                    ds.actions.len(),
                    config.dueling,
                    config.activation,
                    derive_seed(run_seed, 0),
                );
                let target = online.clone();
                let opt = AdamState::new(config.learning_rate, online.params.len());
                DiscreteModel::Direct { online, target, opt }
            }
        }
    };

    let dqn_cfg = config.dqn();
    let steps_per_epoch = ds.train_rows.len().div_ceil(config.batch_size.max(1)) as u64;
    let mut history: Vec<EpochMetrics> = resume
        .as_ref()
        .map(|c| c.metric_history.clone())
        .unwrap_or_default();

    let make_checkpoint = |model: &DiscreteModel, epochs_completed: u32, history: &[EpochMetrics]| {
        let (online, target, opt) = match model {
            DiscreteModel::Direct { online, target, opt }
            | DiscreteModel::Parametric { online, target, opt } => (online, target, opt),
        };
        ModelCheckpoint::for_discrete(
            config,
            run_seed,
            epochs_completed,
            &ds,
            online,
            target,
            opt,
            norm_digest.clone(),
            history.to_vec(),
        )
    };

    for epoch in start_epoch..config.epochs {
        let mut order = ds.train_rows.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(run_seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for (b, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let step = epoch as u64 * steps_per_epoch + b as u64 + 1;
            let loss = match &mut model {
                DiscreteModel::Direct { online, target, opt } => {
                    let batch: DqnBatch = ds.dqn_batch(chunk);
                    dqn_train_step(&batch, online, target, opt, &dqn_cfg, step)
                }
                DiscreteModel::Parametric { online, target, opt } => {
                    let batch: ParametricBatch = ds.parametric_batch(chunk);
                    parametric_train_step(&batch, online, target, opt, &dqn_cfg, step)
                }
            };
            match loss {
                Ok(l) => loss_sum += l,
                Err(RlError::NonFiniteLoss(diag)) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        diagnostics: diag,
                    });
                }
                Err(e) => return Err(e.into()),
            }
            batches += 1;
        }
        let td_loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };

        let q_of = |rows: &[usize]| -> Result<Vec<Vec<f64>>, TrainError> {
            match &model {
                DiscreteModel::Direct { online, .. } => Ok(ds.q_for_rows(online, rows)?),
                DiscreteModel::Parametric { online, .. } => Ok(ds.parametric_q_for_rows(online, rows)?),
            }
        };

        let mc_loss = mc_loss_over(&ds, &q_of)?;
        let cpe = if config.cpe.enabled && !ds.eval_episodes.is_empty() {
            let samples = collect_cpe_samples(&ds, &q_of, config.cpe.target_policy)?;
            let mut cpe_cfg = config.cpe.config.clone();
            cpe_cfg.seed = derive_seed(run_seed, 2000 + epoch as u64);
            let dataset = collect_and_sort(samples, config.gamma)?;
            cpe_report(&dataset, &cpe_cfg)?
        } else {
            Vec::new()
        };

        history.push(EpochMetrics {
            epoch: epoch + 1,
            td_loss,
            mc_loss,
            cpe,
        });

        if let Some(dir) = out_dir {
            metrics::write_metric_files(dir, &history)?;
            let ckpt = make_checkpoint(&model, epoch + 1, &history);
            ckpt.save(&dir.join("checkpoint.json"))?;
        }
    }

    Ok(TrainOutcome {
        checkpoint: make_checkpoint(&model, config.epochs.max(start_epoch), &history),
        history,
    })
}

/// Mean squared error between the model's Q at logged actions and the logged
/// discounted returns, over the evaluation episodes.
fn mc_loss_over(
    ds: &DiscreteDataset,
    q_of: &dyn Fn(&[usize]) -> Result<Vec<Vec<f64>>, TrainError>,
) -> Result<f64, TrainError> {
    let rows: Vec<usize> = ds.eval_episodes.iter().flatten().copied().collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let q = q_of(&rows)?;
    let mut total = 0.0;
    for (i, &row) in rows.iter().enumerate() {
        let logged_pos = ds.possible_position(row);
        let err = q[i][logged_pos] - ds.mc_return[row];
        total += err * err;
    }
    Ok(total / rows.len() as f64)
}

/// Standalone MC-loss over explicit episodes (indices into the dataset).
pub fn mc_loss(
    ds: &DiscreteDataset,
    online: &QNetwork,
    episodes: &[Vec<usize>],
) -> Result<f64, TrainError> {
    let rows: Vec<usize> = episodes.iter().flatten().copied().collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let q = ds.q_for_rows(online, &rows)?;
    let mut total = 0.0;
    for (i, &row) in rows.iter().enumerate() {
        let err = q[i][ds.possible_position(row)] - ds.mc_return[row];
        total += err * err;
    }
    Ok(total / rows.len() as f64)
}

/// Build evaluation samples for the estimators: one per eval-split
/// transition, with Q-values and target propensities over the step's
/// possible actions, evaluated in one pass at epoch end.
fn collect_cpe_samples(
    ds: &DiscreteDataset,
    q_of: &dyn Fn(&[usize]) -> Result<Vec<Vec<f64>>, TrainError>,
    target_policy: PolicyMode,
) -> Result<Vec<EvalStep>, TrainError> {
    let rows: Vec<usize> = ds.eval_episodes.iter().flatten().copied().collect();
    let q = q_of(&rows)?;
    let mut samples = Vec::with_capacity(rows.len());
    for (i, &row) in rows.iter().enumerate() {
        let target_propensities = policy_propensities(&q[i], target_policy);
        samples.push(EvalStep {
            mdp_id: ds.mdp_id[row].clone(),
            ordinal: ds.ordinal[row],
            reward: ds.rewards[row],
            metrics: ds.metrics[row].clone(),
            logged_propensity: ds.logged_propensity[row],
            logged_action: ds.possible_position(row),
            target_propensities,
            q_values: q[i].clone(),
            terminal: ds.terminal[row],
        });
    }
    Ok(samples)
}

fn train_continuous(
    config: &TrainConfig,
    transitions: &[JoinedTransition],
    norm_specs: Vec<NormalizationSpec>,
    seed: u64,
    resume: Option<ModelCheckpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let ds = ContinuousDataset::build(transitions, norm_specs.clone(), config)?;
    let run_seed = resume.as_ref().map(|c| c.run_seed).unwrap_or(seed);
    let start_epoch = resume.as_ref().map(|c| c.epochs_completed).unwrap_or(0);
    let norm_digest = checkpoint::digest_specs(&norm_specs, &[]);
    if let Some(ckpt) = &resume {
        if ckpt.norm_digest != norm_digest {
            return Err(TrainError::NormalizationDigestMismatch {
                ckpt: ckpt.norm_digest.clone(),
                given: norm_digest,
            });
        }
    }

    use checkpoint::ContinuousModel;
    let mut model = match &resume {
        Some(ckpt) => ckpt.restore_continuous()?,
        None => match config.algorithm {
            Algorithm::Ddpg => ContinuousModel::Ddpg(Box::new(Ddpg::new_with(
                ds.state_width,
                ds.action_width,
                &config.hidden,
                config.activation,
                &config.ddpg(),
                derive_seed(run_seed, 0),
            ))),
            _ => ContinuousModel::Sac(Box::new(Sac::new_with(
                ds.state_width,
                ds.action_width,
                &config.hidden,
                config.activation,
                &config.sac(),
                derive_seed(run_seed, 0),
            ))),
        },
    };

    let mut history: Vec<EpochMetrics> = resume
        .as_ref()
        .map(|c| c.metric_history.clone())
        .unwrap_or_default();
    let ddpg_cfg = config.ddpg();
    let sac_cfg = config.sac();

    for epoch in start_epoch..config.epochs {
        let mut order = ds.train_rows.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(run_seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: ContinuousBatch = ds.batch(chunk);
            let loss = match &mut model {
                ContinuousModel::Ddpg(m) => ddpg_step(m, &batch, &ddpg_cfg).map(|l| l.critic_loss),
                ContinuousModel::Sac(m) => {
                    sac_step(m, &batch, &sac_cfg).map(|l| 0.5 * (l.critic1_loss + l.critic2_loss))
                }
            };
            match loss {
                Ok(l) => loss_sum += l,
                Err(RlError::NonFiniteLoss(diag)) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        diagnostics: diag,
                    });
                }
                Err(e) => return Err(e.into()),
            }
            batches += 1;
        }
        let td_loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };
        let mc_loss = ds.mc_loss(&model)?;
        history.push(EpochMetrics {
            epoch: epoch + 1,
            td_loss,
            mc_loss,
            cpe: Vec::new(), // estimators need discrete propensity maps
        });
        if let Some(dir) = out_dir {
            metrics::write_metric_files(dir, &history)?;
            let ckpt = ModelCheckpoint::for_continuous(
                config,
                run_seed,
                epoch + 1,
                &ds,
                &model,
                norm_digest.clone(),
                history.clone(),
            );
            ckpt.save(&dir.join("checkpoint.json"))?;
        }
    }

    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::for_continuous(
            config,
            run_seed,
            config.epochs.max(start_epoch),
            &ds,
            &model,
            norm_digest,
            history.clone(),
        ),
        history,
    })
}

/// Helpers shared by the trainer and the evaluate CLI: build an eval dataset
/// from all episodes of a transition set using a checkpointed model.
pub fn evaluate_model(
    ckpt: &ModelCheckpoint,
    transitions: &[JoinedTransition],
    target_policy: PolicyMode,
    cpe_cfg: &CpeConfig,
) -> Result<Vec<crate::cpe::CpeEstimate>, TrainError> {
    let mut config = ckpt.config.clone();
    config.eval_fraction = 1.0; // evaluate over every episode
    let parametric = ckpt.algorithm == Algorithm::ParametricDqn;
    let norm_specs = ckpt.normalization_specs();
    let ds = DiscreteDataset::build(transitions, norm_specs, &config, parametric)?;
    let model = ckpt.restore_discrete()?;
    let q_of = |rows: &[usize]| -> Result<Vec<Vec<f64>>, TrainError> {
        match &model {
            DiscreteModel::Direct { online, .. } => Ok(ds.q_for_rows(online, rows)?),
            DiscreteModel::Parametric { online, .. } => Ok(ds.parametric_q_for_rows(online, rows)?),
        }
    };
    let samples = collect_cpe_samples(&ds, &q_of, target_policy)?;
    let dataset = collect_and_sort(samples, config.gamma)?;
    Ok(cpe_report(&dataset, cpe_cfg)?)
}

/// Greedy Q-values of a checkpointed discrete model for one feature map,
/// masked to the given possible actions. Used by serving.
pub(crate) fn preprocess_row(
    preprocessor: &Preprocessor,
    features: &BTreeMap<String, f64>,
) -> Array2<f64> {
    let row = preprocessor.transform_row(features);
    Array2::from_shape_vec((1, row.len()), row).expect("row shape")
}
