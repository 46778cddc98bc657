//! Action selection with full propensity maps, and the send/drop threshold
//! policy used for notification-style decisions.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{logsumexp, sigmoid};

/// Serving-time exploration mode. Serializes as its string form:
/// `greedy`, `epsilon:<e>` or `softmax:<t>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyMode {
    Greedy,
    Epsilon { epsilon: f64 },
    Softmax { temperature: f64 },
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyMode::Greedy => write!(f, "greedy"),
            PolicyMode::Epsilon { epsilon } => write!(f, "epsilon:{epsilon}"),
            PolicyMode::Softmax { temperature } => write!(f, "softmax:{temperature}"),
        }
    }
}

impl Serialize for PolicyMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for PolicyMode {
    type Err = String;

    /// Accepts `greedy`, `epsilon:<e>` and `softmax:<t>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "greedy" {
            return Ok(PolicyMode::Greedy);
        }
        if let Some(v) = s.strip_prefix("epsilon:").or_else(|| s.strip_prefix("eps:")) {
            let epsilon: f64 = v.parse().map_err(|_| format!("bad epsilon in {s:?}"))?;
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(format!("epsilon must be in [0, 1], got {epsilon}"));
            }
            return Ok(PolicyMode::Epsilon { epsilon });
        }
        if let Some(v) = s.strip_prefix("softmax:") {
            let temperature: f64 = v.parse().map_err(|_| format!("bad temperature in {s:?}"))?;
            if temperature <= 0.0 {
                return Err(format!("temperature must be positive, got {temperature}"));
            }
            return Ok(PolicyMode::Softmax { temperature });
        }
        Err(format!(
            "unknown policy {s:?}; expected greedy, epsilon:<e> or softmax:<t>"
        ))
    }
}

/// A chosen action plus the full propensity map it was drawn from, ready for
/// logging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub action_index: usize,
    pub propensity: f64,
    pub propensities: Vec<f64>,
}

/// Propensity map of `mode` over the given Q-values. Ties in the argmax share
/// the greedy mass uniformly.
pub fn policy_propensities(q_values: &[f64], mode: PolicyMode) -> Vec<f64> {
    assert!(!q_values.is_empty(), "no candidate actions");
    let n = q_values.len();
    let best = q_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..n).filter(|&i| q_values[i] == best).collect();
    match mode {
        PolicyMode::Greedy => {
            let mut p = vec![0.0; n];
            for &i in &tied {
                p[i] = 1.0 / tied.len() as f64;
            }
            p
        }
        PolicyMode::Epsilon { epsilon } => {
            let mut p = vec![epsilon / n as f64; n];
            for &i in &tied {
                p[i] += (1.0 - epsilon) / tied.len() as f64;
            }
            p
        }
        PolicyMode::Softmax { temperature } => {
            let scaled: Vec<f64> = q_values.iter().map(|q| q / temperature).collect();
            let lse = logsumexp(&scaled);
            scaled.iter().map(|s| (s - lse).exp()).collect()
        }
    }
}

/// Select an action. Greedy mode is deterministic (lowest index among ties);
/// stochastic modes sample from the propensity map.
pub fn select_action(q_values: &[f64], mode: PolicyMode, rng: &mut ChaCha20Rng) -> PolicyDecision {
    let propensities = policy_propensities(q_values, mode);
    let action_index = match mode {
        PolicyMode::Greedy => {
            let best = q_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            q_values.iter().position(|&q| q == best).unwrap()
        }
        _ => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = propensities.len() - 1;
            for (i, &p) in propensities.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    PolicyDecision {
        action_index,
        propensity: propensities[action_index],
        propensities,
    }
}

/// Send iff sigmoid(q_send - q_drop) >= threshold.
pub fn threshold_policy(q_send: f64, q_drop: f64, threshold: f64) -> bool {
    sigmoid(q_send - q_drop) >= threshold
}
