//! Offline (batch) reinforcement learning toolkit.
//!
//! The pipeline turns logged interaction rows into training transitions
//! (`timeline`), fits per-feature normalization (`normalization`), sanity-checks
//! the problem formulation with a learned environment model (`understanding`),
//! trains DQN-family and actor-critic policies (`rl`, `trainer`), evaluates them
//! counterfactually (`cpe`), and scores states for serving (`serving`). The
//! `envs` module bundles small environments with exact oracles so every stage
//! can be verified end to end.

pub mod cpe;
pub mod envs;
pub mod io;
pub mod neural;
pub mod normalization;
pub mod rl;
pub mod serving;
pub mod stats;
pub mod threads;
pub mod timeline;
pub mod trainer;
pub mod understanding;

pub use cpe::{CpeConfig, CpeEstimate, EvalDataset, EvalStep};
pub use normalization::{FeatureKind, NormalizationSpec, Preprocessor};
pub use rl::{DqnConfig, PidController, PolicyDecision, PolicyMode};
pub use timeline::{ActionValue, Episode, JoinedTransition, RawRow, RewardWeights};
pub use trainer::{ModelCheckpoint, TrainConfig};
