//! Tabular gridworld with exact value iteration and policy evaluation.
//!
//! The agent starts at `start` and the episode ends on entering `goal`
//! (reward `goal_reward` on that transition, `step_reward` otherwise).
//! Moves into walls or off the grid leave the agent in place. With
//! `slip > 0`, the chosen action is replaced by one of the other three with
//! probability `slip` (uniformly).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gridworld {
    pub width: usize,
    pub height: usize,
    pub walls: BTreeSet<(usize, usize)>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub gamma: f64,
    pub slip: f64,
    pub max_steps: usize,
}

/// Exact solution: optimal values and a greedy optimal policy per cell.
#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
}

impl Gridworld {
    /// Open 5x5 grid, start (0,0), goal (4,4), goal reward 1, gamma 0.9.
    pub fn default_5x5() -> Self {
        Gridworld {
            width: 5,
            height: 5,
            walls: BTreeSet::new(),
            start: (0, 0),
            goal: (4, 4),
            step_reward: 0.0,
            goal_reward: 1.0,
            gamma: 0.9,
            slip: 0.0,
            max_steps: 100,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }

    pub fn index_cell(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn num_actions(&self) -> usize {
        GRID_ACTIONS.len()
    }

    /// Deterministic move outcome, before slip.
    fn move_from(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (x, y) = cell;
        let target = match action {
            0 => (x, y.wrapping_sub(1)), // up
            1 => (x, y + 1),             // down
            2 => (x.wrapping_sub(1), y), // left
            3 => (x + 1, y),             // right
            _ => panic!("bad action index {action}"),
        };
        if target.0 >= self.width || target.1 >= self.height || self.walls.contains(&target) {
            cell
        } else {
            target
        }
    }

    /// (next cell, probability) pairs for one action, slip included.
    pub fn transition_probs(&self, cell: (usize, usize), action: usize) -> Vec<((usize, usize), f64)> {
        let mut probs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        *probs.entry(self.move_from(cell, action)).or_insert(0.0) += 1.0 - self.slip;
        if self.slip > 0.0 {
            let share = self.slip / 3.0;
            for other in 0..4 {
                if other != action {
                    *probs.entry(self.move_from(cell, other)).or_insert(0.0) += share;
                }
            }
        }
        probs.into_iter().collect()
    }

    fn transition_reward(&self, next: (usize, usize)) -> f64 {
        if next == self.goal {
            self.goal_reward
        } else {
            self.step_reward
        }
    }

    /// Sample one step. Returns (next cell, reward, terminal).
    pub fn step(
        &self,
        cell: (usize, usize),
        action: usize,
        rng: &mut ChaCha20Rng,
    ) -> ((usize, usize), f64, bool) {
        assert!(action < 4, "bad action index {action}");
        let effective = if self.slip > 0.0 && rng.random::<f64>() < self.slip {
            let others: Vec<usize> = (0..4).filter(|&a| a != action).collect();
            others[rng.random_range(0..others.len())]
        } else {
            action
        };
        let next = self.move_from(cell, effective);
        let reward = self.transition_reward(next);
        (next, reward, next == self.goal)
    }

    /// One-hot sparse features: the occupied cell's feature is 1, the rest
    /// are simply absent.
    pub fn state_features(&self, cell: (usize, usize)) -> BTreeMap<String, f64> {
        BTreeMap::from([(format!("f{}", self.cell_index(cell)), 1.0)])
    }

    /// Q(s, a) under a given state-value function.
    fn backup(&self, cell: (usize, usize), action: usize, values: &[f64]) -> f64 {
        self.transition_probs(cell, action)
            .into_iter()
            .map(|(next, p)| {
                let cont = if next == self.goal {
                    0.0
                } else {
                    self.gamma * values[self.cell_index(next)]
                };
                p * (self.transition_reward(next) + cont)
            })
            .sum()
    }

    /// Bellman-optimal values and greedy policy to tolerance `tol`.
    pub fn value_iteration(&self, tol: f64) -> ValueIteration {
        let n = self.num_cells();
        let mut values = vec![0.0; n];
        loop {
            let mut delta: f64 = 0.0;
            for idx in 0..n {
                let cell = self.index_cell(idx);
                if cell == self.goal || self.walls.contains(&cell) {
                    continue;
                }
                let best = (0..4)
                    .map(|a| self.backup(cell, a, &values))
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - values[idx]).abs());
                values[idx] = best;
            }
            if delta <= tol {
                break;
            }
        }
        let policy = (0..n)
            .map(|idx| {
                let cell = self.index_cell(idx);
                let mut best = (0usize, f64::NEG_INFINITY);
                for a in 0..4 {
                    let q = self.backup(cell, a, &values);
                    if q > best.1 {
                        best = (a, q);
                    }
                }
                best.0
            })
            .collect();
        ValueIteration { values, policy }
    }

    /// Exact evaluation of a stochastic policy given per-cell action
    /// propensities.
    pub fn policy_value(&self, propensities: &dyn Fn(usize) -> Vec<f64>, tol: f64) -> Vec<f64> {
        let n = self.num_cells();
        let mut values = vec![0.0; n];
        loop {
            let mut delta: f64 = 0.0;
            for idx in 0..n {
                let cell = self.index_cell(idx);
                if cell == self.goal || self.walls.contains(&cell) {
                    continue;
                }
                let probs = propensities(idx);
                let v: f64 = (0..4).map(|a| probs[a] * self.backup(cell, a, &values)).sum();
                delta = delta.max((v - values[idx]).abs());
                values[idx] = v;
            }
            if delta <= tol {
                break;
            }
        }
        values
    }

    /// Q*(s, a) derived from optimal values, for softmax logging policies.
    pub fn optimal_q(&self, vi: &ValueIteration) -> Vec<Vec<f64>> {
        (0..self.num_cells())
            .map(|idx| {
                let cell = self.index_cell(idx);
                (0..4).map(|a| self.backup(cell, a, &vi.values)).collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn chain_1x3() -> Gridworld {
        Gridworld {
            width: 3,
            height: 1,
            walls: BTreeSet::new(),
            start: (0, 0),
            goal: (2, 0),
            step_reward: 0.0,
            goal_reward: 1.0,
            gamma: 0.9,
            slip: 0.0,
            max_steps: 50,
        }
    }

    #[test]
    fn two_rights_reach_goal() {
        let env = chain_1x3();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (s1, r1, t1) = env.step(env.start, 3, &mut rng);
        assert_eq!((s1, r1, t1), ((1, 0), 0.0, false));
        let (s2, r2, t2) = env.step(s1, 3, &mut rng);
        assert_eq!((s2, r2, t2), ((2, 0), 1.0, true));
    }

    #[test]
    fn value_iteration_1x3_chain() {
        let env = chain_1x3();
        let vi = env.value_iteration(1e-12);
        // two steps to goal: reward discounted once
        assert!((vi.values[env.cell_index(env.start)] - 0.9).abs() < 1e-9);
        assert_eq!(vi.values[env.cell_index(env.goal)], 0.0);
        assert_eq!(vi.policy[env.cell_index(env.start)], 3);
    }

    #[test]
    fn value_iteration_5x5_shortest_path() {
        let env = Gridworld::default_5x5();
        let vi = env.value_iteration(1e-12);
        let expected = 0.9_f64.powi(7); // 8-step path, reward on the final transition
        assert!(
            (vi.values[env.cell_index(env.start)] - expected).abs() < 1e-9,
            "V*(start) = {}",
            vi.values[env.cell_index(env.start)]
        );
    }

    #[test]
    fn bellman_residual_below_tolerance_everywhere() {
        let mut env = Gridworld::default_5x5();
        env.slip = 0.2;
        let tol = 1e-10;
        let vi = env.value_iteration(tol);
        for idx in 0..env.num_cells() {
            let cell = env.index_cell(idx);
            if cell == env.goal {
                continue;
            }
            let best = (0..4)
                .map(|a| env.backup(cell, a, &vi.values))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - vi.values[idx]).abs() <= tol * 10.0);
        }
    }

    #[test]
    fn policy_evaluation_matches_value_iteration_for_optimal_policy() {
        let env = Gridworld::default_5x5();
        let vi = env.value_iteration(1e-12);
        let policy = vi.policy.clone();
        let values = env.policy_value(
            &move |idx| {
                let mut p = vec![0.0; 4];
                p[policy[idx]] = 1.0;
                p
            },
            1e-12,
        );
        for idx in 0..env.num_cells() {
            assert!((values[idx] - vi.values[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn walls_block_movement() {
        let mut env = Gridworld::default_5x5();
        env.walls.insert((1, 0));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (next, _, _) = env.step((0, 0), 3, &mut rng);
        assert_eq!(next, (0, 0));
        // goal still reachable around the wall
        let vi = env.value_iteration(1e-10);
        assert!(vi.values[env.cell_index(env.start)] > 0.0);
    }

    #[test]
    fn slip_probabilities_sum_to_one() {
        let mut env = Gridworld::default_5x5();
        env.slip = 0.3;
        for idx in 0..env.num_cells() {
            for a in 0..4 {
                let total: f64 = env
                    .transition_probs(env.index_cell(idx), a)
                    .iter()
                    .map(|(_, p)| p)
                    .sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
