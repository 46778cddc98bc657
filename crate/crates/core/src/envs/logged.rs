//! Logged-data generation: roll out a logging policy in an environment and
//! emit rows in the ingestion format, with exact propensities for every
//! possible action and the reward stored in the metrics map.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::stats::derive_seed;
use crate::threads;
use crate::timeline::{ActionValue, RawRow};

use super::cartpole::{CartPole, CartPoleState};
use super::gridworld::Gridworld;
use super::pointmass::PointMass;

/// Logging policies with exactly computable propensities.
#[derive(Debug, Clone)]
pub enum LoggedPolicy {
    Uniform,
    /// Epsilon-greedy around the optimal policy of a tabular environment.
    EpsilonGreedy { epsilon: f64 },
    /// Softmax over optimal Q-values of a tabular environment.
    Softmax { temperature: f64 },
}

/// A discrete-action environment that can be rolled out for logging.
pub trait DiscreteSimEnv: Sync {
    type State: Clone + Send;
    fn actions(&self) -> Vec<String>;
    fn reset_state(&self, rng: &mut ChaCha20Rng) -> Self::State;
    fn step_state(
        &self,
        state: &Self::State,
        action: usize,
        rng: &mut ChaCha20Rng,
    ) -> (Self::State, f64, bool);
    fn features(&self, state: &Self::State) -> BTreeMap<String, f64>;
    fn episode_cap(&self) -> usize;
}

impl DiscreteSimEnv for Gridworld {
    type State = (usize, usize);

    fn actions(&self) -> Vec<String> {
        super::gridworld::GRID_ACTIONS.iter().map(|s| s.to_string()).collect()
    }

    fn reset_state(&self, _rng: &mut ChaCha20Rng) -> Self::State {
        self.start
    }

    fn step_state(
        &self,
        state: &Self::State,
        action: usize,
        rng: &mut ChaCha20Rng,
    ) -> (Self::State, f64, bool) {
        self.step(*state, action, rng)
    }

    fn features(&self, state: &Self::State) -> BTreeMap<String, f64> {
        self.state_features(*state)
    }

    fn episode_cap(&self) -> usize {
        self.max_steps
    }
}

impl DiscreteSimEnv for CartPole {
    type State = CartPoleState;

    fn actions(&self) -> Vec<String> {
        CartPole::actions()
    }

    fn reset_state(&self, rng: &mut ChaCha20Rng) -> Self::State {
        self.reset(rng)
    }

    fn step_state(
        &self,
        state: &Self::State,
        action: usize,
        _rng: &mut ChaCha20Rng,
    ) -> (Self::State, f64, bool) {
        self.step(state, action)
    }

    fn features(&self, state: &Self::State) -> BTreeMap<String, f64> {
        self.state_features(state)
    }

    fn episode_cap(&self) -> usize {
        self.max_steps
    }
}

fn sample_index(propensities: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in propensities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    propensities.len() - 1
}

/// Roll out `episodes` episodes of `env` under the policy defined by
/// `propensities` (a per-state propensity map over the env's actions).
///
/// Episodes are generated with per-episode derived seeds, so output is
/// byte-identical regardless of worker-thread count. mdp_id is
/// `"<seed>-<episode index>"` and sequence numbers are step indices.
pub fn generate_logged_data<E: DiscreteSimEnv>(
    env: &E,
    propensities: &(dyn Fn(&E::State) -> Vec<f64> + Sync),
    episodes: usize,
    seed: u64,
) -> Vec<RawRow> {
    let action_names = env.actions();
    let per_episode = threads::ordered_map((0..episodes).collect::<Vec<_>>(), |ep| {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, ep as u64));
        let mut rows = Vec::new();
        let mut state = env.reset_state(&mut rng);
        for t in 0..env.episode_cap() {
            let probs = propensities(&state);
            debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let action = sample_index(&probs, &mut rng);
            let (next, reward, done) = env.step_state(&state, action, &mut rng);
            rows.push(RawRow {
                mdp_id: format!("{seed}-{ep}"),
                sequence_number: t as i64,
                state_features: env.features(&state),
                action: ActionValue::Discrete(action_names[action].clone()),
                action_probability: probs[action],
                metrics: BTreeMap::from([("reward".to_string(), reward)]),
                possible_actions: Some(
                    action_names
                        .iter()
                        .map(|n| ActionValue::Discrete(n.clone()))
                        .collect(),
                ),
                terminal: false,
            });
            if done {
                break;
            }
            state = next;
        }
        rows
    });
    per_episode.into_iter().flatten().collect()
}

/// Propensity map for a [`LoggedPolicy`] on a tabular gridworld.
pub fn gridworld_policy_propensities(
    env: &Gridworld,
    policy: &LoggedPolicy,
) -> Box<dyn Fn(&(usize, usize)) -> Vec<f64> + Sync> {
    let num_actions = env.num_actions();
    match policy {
        LoggedPolicy::Uniform => {
            Box::new(move |_| vec![1.0 / num_actions as f64; num_actions])
        }
        LoggedPolicy::EpsilonGreedy { epsilon } => {
            let vi = env.value_iteration(1e-12);
            let epsilon = *epsilon;
            let env = env.clone();
            Box::new(move |state| {
                let best = vi.policy[env.cell_index(*state)];
                let mut probs = vec![epsilon / num_actions as f64; num_actions];
                probs[best] += 1.0 - epsilon;
                probs
            })
        }
        LoggedPolicy::Softmax { temperature } => {
            let vi = env.value_iteration(1e-12);
            let q = env.optimal_q(&vi);
            let temperature = *temperature;
            let env = env.clone();
            Box::new(move |state| {
                let qs = &q[env.cell_index(*state)];
                let scaled: Vec<f64> = qs.iter().map(|v| v / temperature).collect();
                let lse = crate::stats::logsumexp(&scaled);
                scaled.iter().map(|v| (v - lse).exp()).collect()
            })
        }
    }
}

/// Continuous-action logging for the point mass under a noisy linear
/// controller: a = clip(-k1*pos - k2*vel + U(-noise, noise)). Uniform
/// exploration noise of half-width 0.5 has density 1.0, which is what gets
/// logged as the action probability.
pub fn generate_pointmass_controller_data(
    env: &PointMass,
    gains: (f64, f64),
    noise: f64,
    episodes: usize,
    seed: u64,
) -> Vec<RawRow> {
    let density = (1.0 / (2.0 * noise)).min(1.0);
    let per_episode = threads::ordered_map((0..episodes).collect::<Vec<_>>(), |ep| {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, ep as u64));
        let mut rows = Vec::new();
        let mut state = env.reset(&mut rng);
        loop {
            let base = -gains.0 * state.pos - gains.1 * state.vel;
            let action = (base + rng.random_range(-noise..noise)).clamp(-1.0, 1.0);
            let (next, reward, done) = env.step(&state, action);
            rows.push(RawRow {
                mdp_id: format!("{seed}-{ep}"),
                sequence_number: state.steps as i64,
                state_features: env.state_features(&state),
                action: ActionValue::Parametric(BTreeMap::from([("force".to_string(), action)])),
                action_probability: density,
                metrics: BTreeMap::from([("reward".to_string(), reward)]),
                possible_actions: None,
                terminal: false,
            });
            if done {
                break;
            }
            state = next;
        }
        rows
    });
    per_episode.into_iter().flatten().collect()
}

/// Continuous-action logging for the point mass: uniform force in [-1, 1].
/// `action_probability` stores the (constant) density 0.5; no possible-action
/// list is emitted for continuous domains.
pub fn generate_pointmass_data(env: &PointMass, episodes: usize, seed: u64) -> Vec<RawRow> {
    let per_episode = threads::ordered_map((0..episodes).collect::<Vec<_>>(), |ep| {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, ep as u64));
        let mut rows = Vec::new();
        let mut state = env.reset(&mut rng);
        loop {
            let action: f64 = rng.random_range(-1.0..1.0);
            let (next, reward, done) = env.step(&state, action);
            rows.push(RawRow {
                mdp_id: format!("{seed}-{ep}"),
                sequence_number: state.steps as i64,
                state_features: env.state_features(&state),
                action: ActionValue::Parametric(BTreeMap::from([("force".to_string(), action)])),
                action_probability: 0.5,
                metrics: BTreeMap::from([("reward".to_string(), reward)]),
                possible_actions: None,
                terminal: false,
            });
            if done {
                break;
            }
            state = next;
        }
        rows
    });
    per_episode.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::timeline_join;

    #[test]
    fn uniform_policy_logs_quarter_propensities() {
        let env = Gridworld::default_5x5();
        let policy = gridworld_policy_propensities(&env, &LoggedPolicy::Uniform);
        let rows = generate_logged_data(&env, policy.as_ref(), 5, 3);
        assert!(!rows.is_empty());
        for row in &rows {
            assert_eq!(row.action_probability, 0.25);
            assert_eq!(row.possible_actions.as_ref().unwrap().len(), 4);
        }
    }

    #[test]
    fn epsilon_greedy_propensities_exact() {
        let env = Gridworld::default_5x5();
        let policy =
            gridworld_policy_propensities(&env, &LoggedPolicy::EpsilonGreedy { epsilon: 0.3 });
        let vi = env.value_iteration(1e-12);
        let rows = generate_logged_data(&env, policy.as_ref(), 20, 4);
        for row in &rows {
            let cell_feature = row.state_features.keys().next().unwrap();
            let idx: usize = cell_feature[1..].parse().unwrap();
            let best = super::super::gridworld::GRID_ACTIONS[vi.policy[idx]];
            let expected = if row.action.as_discrete().unwrap() == best {
                0.7 + 0.3 / 4.0
            } else {
                0.3 / 4.0
            };
            assert!((row.action_probability - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_deterministic_per_seed() {
        let env = Gridworld::default_5x5();
        let policy = gridworld_policy_propensities(&env, &LoggedPolicy::Uniform);
        let a = generate_logged_data(&env, policy.as_ref(), 100, 9);
        let b = generate_logged_data(&env, policy.as_ref(), 100, 9);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn propensity_map_sums_to_one_and_matches_logged() {
        let env = Gridworld::default_5x5();
        let policy =
            gridworld_policy_propensities(&env, &LoggedPolicy::Softmax { temperature: 0.5 });
        let rows = generate_logged_data(&env, policy.as_ref(), 10, 11);
        for row in &rows {
            let cell_feature = row.state_features.keys().next().unwrap();
            let idx: usize = cell_feature[1..].parse().unwrap();
            let probs = policy(&env.index_cell(idx));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let chosen = super::super::gridworld::GRID_ACTIONS
                .iter()
                .position(|a| *a == row.action.as_discrete().unwrap())
                .unwrap();
            assert_eq!(row.action_probability, probs[chosen]);
        }
    }

    #[test]
    fn generated_rows_pass_timeline_join() {
        let env = CartPole::default();
        let rows = generate_logged_data(&env, &|_: &CartPoleState| vec![0.5, 0.5], 10, 5);
        let transitions = timeline_join(rows).unwrap();
        assert!(transitions.iter().any(|t| t.terminal));
        assert!(transitions.iter().all(|t| t.metrics["reward"] == 1.0));
    }

    #[test]
    fn pointmass_rows_are_continuous() {
        let env = PointMass::default();
        let rows = generate_pointmass_data(&env, 3, 2);
        assert_eq!(rows.len(), 150); // fixed 50-step horizon
        for row in &rows {
            assert!(row.possible_actions.is_none());
            assert_eq!(row.action_probability, 0.5);
            let force = row.action.as_parametric().unwrap()["force"];
            assert!((-1.0..=1.0).contains(&force));
        }
    }
}
