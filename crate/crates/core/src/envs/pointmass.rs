//! 1-D point mass with a continuous force action in [-1, 1], quadratic cost
//! reward -(pos^2 + 0.1 * action^2), linear dynamics, fixed 50-step horizon.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMassState {
    pub pos: f64,
    pub vel: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMass {
    pub dt: f64,
    pub horizon: usize,
    pub action_cost: f64,
}

impl Default for PointMass {
    fn default() -> Self {
        PointMass {
            dt: 0.1,
            horizon: 50,
            action_cost: 0.1,
        }
    }
}

impl PointMass {
    /// Start at a uniformly random position in [-1, 1] with a random
    /// initial velocity in [-0.5, 0.5], so logged trajectories cover the
    /// braking corridors a controller actually passes through.
    pub fn reset(&self, rng: &mut ChaCha20Rng) -> PointMassState {
        PointMassState {
            pos: rng.random_range(-1.0..1.0),
            vel: rng.random_range(-0.5..0.5),
            steps: 0,
        }
    }

    /// Returns (next state, reward, terminal). The action is clamped to
    /// [-1, 1]; reward is charged on the current position and the applied
    /// action.
    pub fn step(&self, s: &PointMassState, action: f64) -> (PointMassState, f64, bool) {
        let a = action.clamp(-1.0, 1.0);
        let reward = -(s.pos * s.pos + self.action_cost * a * a);
        let next = PointMassState {
            pos: s.pos + self.dt * s.vel,
            vel: s.vel + self.dt * a,
            steps: s.steps + 1,
        };
        let terminal = next.steps >= self.horizon;
        (next, reward, terminal)
    }

    pub fn state_features(&self, s: &PointMassState) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("pos".to_string(), s.pos),
            ("vel".to_string(), s.vel),
        ])
    }

    /// Episode return of the linear controller a = -k1*pos - k2*vel from a
    /// fixed start (deterministic dynamics, so this is exact).
    pub fn linear_controller_return(&self, start: PointMassState, k1: f64, k2: f64) -> f64 {
        let mut s = start;
        let mut total = 0.0;
        loop {
            let a = (-k1 * s.pos - k2 * s.vel).clamp(-1.0, 1.0);
            let (next, r, done) = self.step(&s, a);
            total += r;
            if done {
                return total;
            }
            s = next;
        }
    }

    /// Best linear state-feedback controller found by grid search over the
    /// gain pair, averaged over the given starts. Returns (k1, k2, value).
    pub fn best_linear_controller(&self, starts: &[PointMassState]) -> (f64, f64, f64) {
        let mut best = (0.0, 0.0, f64::NEG_INFINITY);
        let grid: Vec<f64> = (0..=60).map(|i| i as f64 * 0.1).collect();
        for &k1 in &grid {
            for &k2 in &grid {
                let value = starts
                    .iter()
                    .map(|&s| self.linear_controller_return(s, k1, k2))
                    .sum::<f64>()
                    / starts.len() as f64;
                if value > best.2 {
                    best = (k1, k2, value);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_arithmetic() {
        let env = PointMass::default();
        let s = PointMassState { pos: 1.0, vel: 0.0, steps: 0 };
        let (next, reward, terminal) = env.step(&s, 0.0);
        assert_eq!(next.pos, 1.0);
        assert_eq!(next.vel, 0.0);
        assert_eq!(reward, -1.0);
        assert!(!terminal);
    }

    #[test]
    fn horizon_terminates() {
        let env = PointMass::default();
        let mut s = PointMassState { pos: 0.5, vel: 0.0, steps: 0 };
        let mut count = 0;
        loop {
            let (next, _, done) = env.step(&s, -0.1);
            count += 1;
            if done {
                break;
            }
            s = next;
        }
        assert_eq!(count, 50);
    }

    #[test]
    fn controller_beats_doing_nothing() {
        let env = PointMass::default();
        let start = PointMassState { pos: 1.0, vel: 0.0, steps: 0 };
        let passive = env.linear_controller_return(start, 0.0, 0.0);
        let (k1, k2, _) = env.best_linear_controller(&[start]);
        let active = env.linear_controller_return(start, k1, k2);
        assert!(active > passive, "active {active} passive {passive}");
    }
}
