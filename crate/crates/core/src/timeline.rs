//! Timeline join: turn as-logged rows into consecutive state/action
//! transitions, plus reward shaping from the per-row metrics map.
//!
//! Input rows arrive in any order. The join groups them by `mdp_id`, sorts by
//! `sequence_number`, links each row to its successor, and marks the last row
//! of each episode terminal. Rewards are never materialized in the rows;
//! training computes them as a dot product of the metrics map with a weight
//! map, so re-weighting rewards never requires re-running the join.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("duplicate (mdp_id, sequence_number) = ({mdp_id}, {sequence_number})")]
    DuplicateKey { mdp_id: String, sequence_number: i64 },
    #[error("duplicate ordinal {ordinal} within mdp_id {mdp_id}")]
    DuplicateOrdinal { mdp_id: String, ordinal: u64 },
    #[error("mdp_id {mdp_id}: non-terminal transition at ordinal {ordinal} (only the last transition of an episode may be terminal)")]
    TerminalNotLast { mdp_id: String, ordinal: u64 },
    #[error("row (mdp_id {mdp_id}, sequence_number {sequence_number}): {reason}")]
    InvalidRow {
        mdp_id: String,
        sequence_number: i64,
        reason: String,
    },
    #[error("reward weights name unknown metrics: {names:?}")]
    UnknownMetrics { names: Vec<String> },
    #[error("non-finite reward weight for metric {0}")]
    NonFiniteWeight(String),
}

/// A logged action: a name for discrete domains, a feature map for
/// parametric or continuous domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionValue {
    Discrete(String),
    Parametric(BTreeMap<String, f64>),
}

impl ActionValue {
    pub fn as_discrete(&self) -> Option<&str> {
        match self {
            ActionValue::Discrete(name) => Some(name),
            ActionValue::Parametric(_) => None,
        }
    }

    pub fn as_parametric(&self) -> Option<&BTreeMap<String, f64>> {
        match self {
            ActionValue::Discrete(_) => None,
            ActionValue::Parametric(features) => Some(features),
        }
    }
}

/// One logged observation, as produced by the serving side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub mdp_id: String,
    pub sequence_number: i64,
    pub state_features: BTreeMap<String, f64>,
    pub action: ActionValue,
    pub action_probability: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub possible_actions: Option<Vec<ActionValue>>,
    /// Optional override: force this row to end its episode even if later
    /// sequence numbers exist for the same mdp_id.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub terminal: bool,
}

impl RawRow {
    /// Structural validation of a single row.
    pub fn validate(&self) -> Result<(), TimelineError> {
        let invalid = |reason: String| TimelineError::InvalidRow {
            mdp_id: self.mdp_id.clone(),
            sequence_number: self.sequence_number,
            reason,
        };
        if !(self.action_probability > 0.0 && self.action_probability <= 1.0) {
            return Err(invalid(format!(
                "action_probability must be in (0, 1], got {}",
                self.action_probability
            )));
        }
        if self.state_features.values().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite state feature".into()));
        }
        if self.metrics.values().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite metric value".into()));
        }
        if let Some(possible) = &self.possible_actions {
            if !possible.contains(&self.action) {
                return Err(invalid("action not listed in possible_actions".into()));
            }
        }
        Ok(())
    }
}

/// A joined transition: the raw row plus its successor's state and action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedTransition {
    pub mdp_id: String,
    pub sequence_number: i64,
    pub state_features: BTreeMap<String, f64>,
    pub action: ActionValue,
    pub action_probability: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub possible_actions: Option<Vec<ActionValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_state_features: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_action: Option<ActionValue>,
    /// 1-based rank of this row within its episode.
    pub sequence_number_ordinal: u64,
    /// Raw sequence-number gap to the successor; 1 for terminal rows.
    pub time_diff: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub possible_next_actions: Option<Vec<ActionValue>>,
    pub terminal: bool,
}

/// Per-metric weights used to shape the reward scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardWeights(pub BTreeMap<String, f64>);

impl RewardWeights {
    /// Weight 1.0 on the metric named `reward`.
    pub fn reward_only() -> Self {
        RewardWeights(BTreeMap::from([("reward".to_string(), 1.0)]))
    }

    /// Reject non-finite weights and weight names absent from `known_metrics`.
    pub fn validate(&self, known_metrics: &BTreeSet<String>) -> Result<(), TimelineError> {
        for (name, w) in &self.0 {
            if !w.is_finite() {
                return Err(TimelineError::NonFiniteWeight(name.clone()));
            }
        }
        let unknown: Vec<String> = self
            .0
            .keys()
            .filter(|name| !known_metrics.contains(*name))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(TimelineError::UnknownMetrics { names: unknown })
        }
    }
}

/// Dot product of a metrics map with a weight map. Metrics missing under a
/// weighted name contribute 0, so sparse logging is fine.
pub fn compute_reward(metrics: &BTreeMap<String, f64>, weights: &RewardWeights) -> f64 {
    weights
        .0
        .iter()
        .map(|(name, w)| w * metrics.get(name).copied().unwrap_or(0.0))
        .sum()
}

/// Join logged rows into transitions.
///
/// Output is canonically ordered by (mdp_id, sequence_number), so any
/// permutation of the input yields byte-identical serialized output. Rows
/// following a terminal-override row within the same mdp_id are dropped with
/// a warning.
pub fn timeline_join(rows: Vec<RawRow>) -> Result<Vec<JoinedTransition>, TimelineError> {
    let mut groups: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    for row in rows {
        row.validate()?;
        groups.entry(row.mdp_id.clone()).or_default().push(row);
    }

    let mut out = Vec::new();
    let mut dropped_after_override = 0usize;
    for (mdp_id, mut group) in groups {
        group.sort_by_key(|r| r.sequence_number);
        for pair in group.windows(2) {
            if pair[0].sequence_number == pair[1].sequence_number {
                return Err(TimelineError::DuplicateKey {
                    mdp_id,
                    sequence_number: pair[0].sequence_number,
                });
            }
        }
        if let Some(cut) = group.iter().position(|r| r.terminal) {
            dropped_after_override += group.len() - cut - 1;
            group.truncate(cut + 1);
        }

        let n = group.len();
        for idx in 0..n {
            let successor = group.get(idx + 1).cloned();
            let row = &group[idx];
            let terminal = successor.is_none();
            let time_diff = successor
                .as_ref()
                .map(|next| next.sequence_number - row.sequence_number)
                .unwrap_or(1);
            out.push(JoinedTransition {
                mdp_id: row.mdp_id.clone(),
                sequence_number: row.sequence_number,
                state_features: row.state_features.clone(),
                action: row.action.clone(),
                action_probability: row.action_probability,
                metrics: row.metrics.clone(),
                possible_actions: row.possible_actions.clone(),
                next_state_features: successor.as_ref().map(|next| next.state_features.clone()),
                next_action: successor.as_ref().map(|next| next.action.clone()),
                sequence_number_ordinal: (idx + 1) as u64,
                time_diff,
                possible_next_actions: successor
                    .as_ref()
                    .and_then(|next| next.possible_actions.clone()),
                terminal,
            });
        }
    }
    if dropped_after_override > 0 {
        log::warn!(
            "dropped {dropped_after_override} row(s) following a terminal override within their episode"
        );
    }
    Ok(out)
}

/// An ordered episode of transitions for a single mdp_id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub mdp_id: String,
    pub transitions: Vec<JoinedTransition>,
}

/// Group transitions into episodes ordered by first appearance of mdp_id;
/// transitions within an episode are sorted by ordinal.
pub fn group_episodes(
    transitions: Vec<JoinedTransition>,
) -> Result<Vec<Episode>, TimelineError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<JoinedTransition>> = BTreeMap::new();
    for t in transitions {
        if !by_id.contains_key(&t.mdp_id) {
            order.push(t.mdp_id.clone());
        }
        by_id.entry(t.mdp_id.clone()).or_default().push(t);
    }

    let mut episodes = Vec::with_capacity(order.len());
    for mdp_id in order {
        let mut ts = by_id.remove(&mdp_id).expect("grouped above");
        ts.sort_by_key(|t| t.sequence_number_ordinal);
        for pair in ts.windows(2) {
            if pair[0].sequence_number_ordinal == pair[1].sequence_number_ordinal {
                return Err(TimelineError::DuplicateOrdinal {
                    mdp_id,
                    ordinal: pair[0].sequence_number_ordinal,
                });
            }
        }
        if let Some(pos) = ts.iter().position(|t| t.terminal) {
            if pos + 1 != ts.len() {
                return Err(TimelineError::TerminalNotLast {
                    mdp_id,
                    ordinal: ts[pos].sequence_number_ordinal,
                });
            }
        }
        episodes.push(Episode {
            mdp_id,
            transitions: ts,
        });
    }
    Ok(episodes)
}
