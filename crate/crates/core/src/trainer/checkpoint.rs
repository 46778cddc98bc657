//! Portable model checkpoints: JSON header with the network topology,
//! normalization specs and training config, plus base64-encoded
//! little-endian f64 parameter and optimizer-state blocks. Round trips are
//! bit-exact, which is what makes warm starts and serving reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::neural::{AdamState, MlpSpec, ParamVector};
use crate::normalization::{specs_from_json, specs_to_json, NormalizationSpec};
use crate::rl::{Ddpg, QHead, QNetwork, Sac};
use crate::stats::fnv1a64;

use super::dataset::{ContinuousDataset, DiscreteDataset};
use super::metrics::EpochMetrics;
use super::{Algorithm, DiscreteModel, TrainConfig, TrainError};

/// One serialized network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkBlob {
    pub spec: MlpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<QHead>,
    pub params_b64: String,
}

impl NetworkBlob {
    fn of(spec: &MlpSpec, head: Option<QHead>, params: &ParamVector) -> Self {
        NetworkBlob {
            spec: spec.clone(),
            head,
            params_b64: params.to_base64(),
        }
    }

    fn params(&self) -> Result<ParamVector, TrainError> {
        ParamVector::from_base64(&self.params_b64)
            .map_err(|e| TrainError::Io(crate::io::IoError::MalformedRow {
                path: "checkpoint".to_string(),
                line: 0,
                source: serde_json::Error::io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    e,
                )),
            }))
    }
}

/// Serialized Adam state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerBlob {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m_b64: String,
    pub v_b64: String,
}

impl OptimizerBlob {
    fn of(state: &AdamState) -> Self {
        OptimizerBlob {
            lr: state.lr,
            beta1: state.beta1,
            beta2: state.beta2,
            epsilon: state.epsilon,
            t: state.t,
            m_b64: ParamVector { data: state.m.clone() }.to_base64(),
            v_b64: ParamVector { data: state.v.clone() }.to_base64(),
        }
    }

    fn state(&self) -> Result<AdamState, TrainError> {
        let decode = |s: &str| {
            ParamVector::from_base64(s).map_err(|e| {
                TrainError::Io(crate::io::IoError::MalformedRow {
                    path: "checkpoint".to_string(),
                    line: 0,
                    source: serde_json::Error::io(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        e,
                    )),
                })
            })
        };
        Ok(AdamState {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            t: self.t,
            m: decode(&self.m_b64)?.data,
            v: decode(&self.v_b64)?.data,
        })
    }
}

/// The unit of warm start and serving.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub algorithm: Algorithm,
    pub config: TrainConfig,
    pub run_seed: u64,
    pub epochs_completed: u32,
    /// Discrete action vocabulary (empty for continuous algorithms).
    pub actions: Vec<String>,
    /// Action feature ids for parametric/continuous algorithms.
    pub action_feature_ids: Vec<String>,
    /// State normalization specs as a feature_id -> {kind, params} map.
    pub normalization: serde_json::Value,
    /// Action-feature normalization specs (parametric only).
    pub action_normalization: serde_json::Value,
    pub norm_digest: String,
    pub networks: BTreeMap<String, NetworkBlob>,
    pub optimizers: BTreeMap<String, OptimizerBlob>,
    /// Number of sampling calls the SAC actor has made, for exact resume.
    #[serde(default)]
    pub sac_rng_calls: u64,
    #[serde(default)]
    pub metric_history: Vec<EpochMetrics>,
}

/// Stable digest of the normalization specs embedded in a checkpoint.
pub fn digest_specs(state: &[NormalizationSpec], action: &[NormalizationSpec]) -> String {
    let value = serde_json::json!({
        "state": specs_to_json(state),
        "action": specs_to_json(action),
    });
    format!("{:016x}", fnv1a64(value.to_string().as_bytes()))
}

/// Restored actor-critic bundle.
pub enum ContinuousModel {
    Ddpg(Box<Ddpg>),
    Sac(Box<Sac>),
}

impl ModelCheckpoint {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn for_discrete(
        config: &TrainConfig,
        run_seed: u64,
        epochs_completed: u32,
        ds: &DiscreteDataset,
        online: &QNetwork,
        target: &QNetwork,
        opt: &AdamState,
        norm_digest: String,
        metric_history: Vec<EpochMetrics>,
    ) -> ModelCheckpoint {
        let mut networks = BTreeMap::new();
        networks.insert(
            "online".to_string(),
            NetworkBlob::of(&online.spec, Some(online.head), &online.params),
        );
        networks.insert(
            "target".to_string(),
            NetworkBlob::of(&target.spec, Some(target.head), &target.params),
        );
        let mut optimizers = BTreeMap::new();
        optimizers.insert("online".to_string(), OptimizerBlob::of(opt));
        ModelCheckpoint {
            version: 1,
            algorithm: config.algorithm,
            config: config.clone(),
            run_seed,
            epochs_completed,
            sac_rng_calls: 0,
            actions: ds.actions.clone(),
            action_feature_ids: ds
                .action_preprocessor
                .as_ref()
                .map(|p| p.layout().keys().cloned().collect())
                .unwrap_or_default(),
            normalization: specs_to_json(ds.preprocessor.specs()),
            action_normalization: specs_to_json(&ds.action_norm_specs),
            norm_digest,
            networks,
            optimizers,
            metric_history,
        }
    }

    pub(super) fn for_continuous(
        config: &TrainConfig,
        run_seed: u64,
        epochs_completed: u32,
        ds: &ContinuousDataset,
        model: &ContinuousModel,
        norm_digest: String,
        metric_history: Vec<EpochMetrics>,
    ) -> ModelCheckpoint {
        let mut networks = BTreeMap::new();
        let mut optimizers = BTreeMap::new();
        match model {
            ContinuousModel::Ddpg(m) => {
                networks.insert("actor".into(), NetworkBlob::of(&m.actor_spec, None, &m.actor));
                networks.insert(
                    "actor_target".into(),
                    NetworkBlob::of(&m.actor_spec, None, &m.actor_target),
                );
                networks.insert("critic".into(), NetworkBlob::of(&m.critic_spec, None, &m.critic));
                networks.insert(
                    "critic_target".into(),
                    NetworkBlob::of(&m.critic_spec, None, &m.critic_target),
                );
                optimizers.insert("actor".into(), OptimizerBlob::of(&m.actor_opt));
                optimizers.insert("critic".into(), OptimizerBlob::of(&m.critic_opt));
            }
            ContinuousModel::Sac(m) => {
                networks.insert("actor".into(), NetworkBlob::of(&m.actor_spec, None, &m.actor));
                networks.insert("critic1".into(), NetworkBlob::of(&m.critic_spec, None, &m.critic1));
                networks.insert("critic2".into(), NetworkBlob::of(&m.critic_spec, None, &m.critic2));
                networks.insert(
                    "critic1_target".into(),
                    NetworkBlob::of(&m.critic_spec, None, &m.critic1_target),
                );
                networks.insert(
                    "critic2_target".into(),
                    NetworkBlob::of(&m.critic_spec, None, &m.critic2_target),
                );
                optimizers.insert("actor".into(), OptimizerBlob::of(&m.actor_opt));
                optimizers.insert("critic1".into(), OptimizerBlob::of(&m.critic1_opt));
                optimizers.insert("critic2".into(), OptimizerBlob::of(&m.critic2_opt));
            }
        }
        ModelCheckpoint {
            version: 1,
            algorithm: config.algorithm,
            config: config.clone(),
            run_seed,
            epochs_completed,
            sac_rng_calls: match model {
                ContinuousModel::Sac(m) => m.rng_calls,
                ContinuousModel::Ddpg(_) => 0,
            },
            actions: Vec::new(),
            action_feature_ids: ds.action_feature_ids.clone(),
            normalization: specs_to_json(ds.preprocessor.specs()),
            action_normalization: serde_json::json!({}),
            norm_digest,
            networks,
            optimizers,
            metric_history,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        crate::io::write_json(path, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelCheckpoint, TrainError> {
        Ok(crate::io::read_json(path)?)
    }

    pub fn normalization_specs(&self) -> Vec<NormalizationSpec> {
        specs_from_json(&self.normalization).expect("valid embedded specs")
    }

    pub fn action_normalization_specs(&self) -> Vec<NormalizationSpec> {
        specs_from_json(&self.action_normalization).expect("valid embedded specs")
    }

    fn network(&self, name: &str) -> Result<&NetworkBlob, TrainError> {
        self.networks.get(name).ok_or_else(|| {
            TrainError::Io(crate::io::IoError::MalformedRow {
                path: format!("checkpoint (missing network {name})"),
                line: 0,
                source: serde_json::Error::io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    name.to_string(),
                )),
            })
        })
    }

    pub(super) fn restore_discrete(&self) -> Result<DiscreteModel, TrainError> {
        let online_blob = self.network("online")?;
        let target_blob = self.network("target")?;
        let head = online_blob.head.unwrap_or(QHead::Parametric);
        let online = QNetwork {
            spec: online_blob.spec.clone(),
            params: online_blob.params()?,
            head,
        };
        let target = QNetwork {
            spec: target_blob.spec.clone(),
            params: target_blob.params()?,
            head: target_blob.head.unwrap_or(QHead::Parametric),
        };
        let opt = self.optimizers["online"].state()?;
        Ok(match self.algorithm {
            Algorithm::ParametricDqn => DiscreteModel::Parametric { online, target, opt },
            _ => DiscreteModel::Direct { online, target, opt },
        })
    }

    /// Restore the online Q-network of a DQN-family checkpoint.
    pub fn online_network(&self) -> Result<QNetwork, TrainError> {
        let blob = self.network("online")?;
        Ok(QNetwork {
            spec: blob.spec.clone(),
            params: blob.params()?,
            head: blob.head.unwrap_or(QHead::Parametric),
        })
    }

    /// Restore the actor-critic bundle of a DDPG/SAC checkpoint.
    pub fn restore_continuous(&self) -> Result<ContinuousModel, TrainError> {
        match self.algorithm {
            Algorithm::Ddpg => {
                let actor = self.network("actor")?;
                let critic = self.network("critic")?;
                Ok(ContinuousModel::Ddpg(Box::new(Ddpg {
                    actor_spec: actor.spec.clone(),
                    actor: actor.params()?,
                    actor_target: self.network("actor_target")?.params()?,
                    critic_spec: critic.spec.clone(),
                    critic: critic.params()?,
                    critic_target: self.network("critic_target")?.params()?,
                    actor_opt: self.optimizers["actor"].state()?,
                    critic_opt: self.optimizers["critic"].state()?,
                    action_dim: self.action_feature_ids.len(),
                })))
            }
            _ => {
                let actor = self.network("actor")?;
                let critic1 = self.network("critic1")?;
                Ok(ContinuousModel::Sac(Box::new(Sac {
                    actor_spec: actor.spec.clone(),
                    actor: actor.params()?,
                    critic_spec: critic1.spec.clone(),
                    critic1: critic1.params()?,
                    critic2: self.network("critic2")?.params()?,
                    critic1_target: self.network("critic1_target")?.params()?,
                    critic2_target: self.network("critic2_target")?.params()?,
                    actor_opt: self.optimizers["actor"].state()?,
                    critic1_opt: self.optimizers["critic1"].state()?,
                    critic2_opt: self.optimizers["critic2"].state()?,
                    action_dim: self.action_feature_ids.len(),
                    rng_seed: crate::stats::derive_seed(self.run_seed, 0),
                    rng_calls: self.sac_rng_calls,
                })))
            }
        }
    }
}
