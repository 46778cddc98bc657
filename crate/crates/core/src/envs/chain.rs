//! Small tabular chain MDP with explicit transition/reward tables, fixed
//! behavior and target policies, exact finite-horizon policy values and
//! Q-functions by dynamic programming, and simulation into evaluation
//! datasets. This is the ground-truth fixture for the counterfactual
//! estimators.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cpe::{EvalDataset, EvalStep};
use crate::stats::derive_seed;

/// Tabular MDP: `transitions[s][a][s']`, `rewards[s][a]`, two row-stochastic
/// policies, a fixed start state, and a fixed episode horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub start_state: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

/// One simulated episode under the behavior policy.
#[derive(Debug, Clone)]
pub struct ChainEpisode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl ChainMdp {
    /// Default 5-state fixture: two actions (0 = left, 1 = right), moves
    /// succeed with probability 0.9, the right action pays a large bonus and
    /// the state adds a small drift term, behavior is uniform while the
    /// target strongly prefers right, five-step episodes, undiscounted. The
    /// reward leans on the action so that per-step importance sampling stays
    /// nearly unbiased while its variance is dominated by the action choice.
    pub fn default_fixture() -> Self {
        let n = 5;
        let mut transitions = vec![vec![vec![0.0; n]; 2]; n];
        let mut rewards = vec![vec![0.0; 2]; n];
        for s in 0..n {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(n - 1);
            transitions[s][0][left] += 0.9;
            transitions[s][0][s] += 0.1;
            transitions[s][1][right] += 0.9;
            transitions[s][1][s] += 0.1;
            rewards[s][0] = 1.0 + 0.05 * s as f64;
            rewards[s][1] = 3.0 + 0.05 * s as f64;
        }
        ChainMdp {
            n_states: n,
            n_actions: 2,
            horizon: 5,
            gamma: 1.0,
            start_state: 0,
            transitions,
            rewards,
            behavior: vec![vec![0.5, 0.5]; n],
            target: vec![vec![0.15, 0.85]; n],
        }
    }

    /// Finite-horizon state values per step: `values[t][s]` with
    /// `values[horizon] = 0`.
    pub fn policy_values(&self, policy: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let q = self.policy_q_values(policy);
        let mut values = vec![vec![0.0; self.n_states]; self.horizon + 1];
        for t in 0..self.horizon {
            for s in 0..self.n_states {
                values[t][s] = (0..self.n_actions).map(|a| policy[s][a] * q[t][s][a]).sum();
            }
        }
        values
    }

    /// Finite-horizon Q-functions per step: `q[t][s][a]`.
    pub fn policy_q_values(&self, policy: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let mut q = vec![vec![vec![0.0; self.n_actions]; self.n_states]; self.horizon];
        let mut next_v = vec![0.0; self.n_states];
        for t in (0..self.horizon).rev() {
            let mut v_t = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let expected_next: f64 = (0..self.n_states)
                        .map(|s2| self.transitions[s][a][s2] * next_v[s2])
                        .sum();
                    q[t][s][a] = self.rewards[s][a] + self.gamma * expected_next;
                }
                v_t[s] = (0..self.n_actions).map(|a| policy[s][a] * q[t][s][a]).sum();
            }
            next_v = v_t;
        }
        q
    }

    /// Exact value of a policy from the start state.
    pub fn policy_value(&self, policy: &[Vec<f64>]) -> f64 {
        self.policy_values(policy)[0][self.start_state]
    }

    fn sample_categorical(probs: &[f64], rng: &mut ChaCha20Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Simulate episodes under the behavior policy.
    pub fn simulate(&self, episodes: usize, seed: u64) -> Vec<ChainEpisode> {
        (0..episodes)
            .map(|ep| {
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, ep as u64));
                let mut state = self.start_state;
                let mut out = ChainEpisode {
                    states: Vec::with_capacity(self.horizon),
                    actions: Vec::with_capacity(self.horizon),
                    rewards: Vec::with_capacity(self.horizon),
                };
                for _ in 0..self.horizon {
                    let action = Self::sample_categorical(&self.behavior[state], &mut rng);
                    out.states.push(state);
                    out.actions.push(action);
                    out.rewards.push(self.rewards[state][action]);
                    state = Self::sample_categorical(&self.transitions[state][action], &mut rng);
                }
                out
            })
            .collect()
    }

    /// Package simulated episodes as an evaluation dataset, with Q-values
    /// supplied by `q_hat(t, s, a)`. Pass the exact `policy_q_values` of the
    /// target policy for the oracle setting, or zeros to disable the model.
    pub fn eval_dataset(
        &self,
        episodes: &[ChainEpisode],
        q_hat: &dyn Fn(usize, usize, usize) -> f64,
    ) -> EvalDataset {
        let eval_episodes: Vec<Vec<EvalStep>> = episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                ep.states
                    .iter()
                    .enumerate()
                    .map(|(t, &s)| {
                        let a = ep.actions[t];
                        EvalStep {
                            mdp_id: format!("chain-{i}"),
                            ordinal: t as u64 + 1,
                            reward: ep.rewards[t],
                            metrics: BTreeMap::from([("reward".to_string(), ep.rewards[t])]),
                            logged_propensity: self.behavior[s][a],
                            logged_action: a,
                            target_propensities: self.target[s].clone(),
                            q_values: (0..self.n_actions).map(|aa| q_hat(t, s, aa)).collect(),
                            terminal: t + 1 == ep.states.len(),
                        }
                    })
                    .collect()
            })
            .collect();
        EvalDataset {
            episodes: eval_episodes,
            gamma: self.gamma,
        }
    }
}
