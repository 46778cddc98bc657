//! Cart-pole balancing with the standard published constants: cart mass 1.0,
//! pole mass 0.1, half-length 0.5, force 10.0, dt 0.02, gravity 9.8, failure
//! at |x| > 2.4 or |theta| > 12 degrees, 200-step cap, reward 1 per step.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub steps: usize,
}

impl CartPoleState {
    pub fn zero() -> Self {
        CartPoleState {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CartPole {
    pub gravity: f64,
    pub masscart: f64,
    pub masspole: f64,
    pub length: f64,
    pub force_mag: f64,
    pub tau: f64,
    pub x_threshold: f64,
    pub theta_threshold: f64,
    pub max_steps: usize,
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole {
            gravity: 9.8,
            masscart: 1.0,
            masspole: 0.1,
            length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            x_threshold: 2.4,
            theta_threshold: 12.0 * std::f64::consts::PI / 180.0,
            max_steps: 200,
        }
    }
}

impl CartPole {
    pub fn actions() -> Vec<String> {
        vec!["left".to_string(), "right".to_string()]
    }

    /// Uniform start in [-0.05, 0.05]^4.
    pub fn reset(&self, rng: &mut ChaCha20Rng) -> CartPoleState {
        CartPoleState {
            x: rng.random_range(-0.05..0.05),
            x_dot: rng.random_range(-0.05..0.05),
            theta: rng.random_range(-0.05..0.05),
            theta_dot: rng.random_range(-0.05..0.05),
            steps: 0,
        }
    }

    pub fn failed(&self, s: &CartPoleState) -> bool {
        s.x.abs() > self.x_threshold || s.theta.abs() > self.theta_threshold
    }

    /// Euler-integrated step. Returns (next state, reward, terminal); reward
    /// is 1.0 for every executed step, terminal on failure or the step cap.
    pub fn step(&self, s: &CartPoleState, action: usize) -> (CartPoleState, f64, bool) {
        assert!(action < 2, "bad action index {action}");
        let force = if action == 1 { self.force_mag } else { -self.force_mag };
        let total_mass = self.masscart + self.masspole;
        let polemass_length = self.masspole * self.length;

        let cos_t = s.theta.cos();
        let sin_t = s.theta.sin();
        let temp = (force + polemass_length * s.theta_dot * s.theta_dot * sin_t) / total_mass;
        let theta_acc = (self.gravity * sin_t - cos_t * temp)
            / (self.length * (4.0 / 3.0 - self.masspole * cos_t * cos_t / total_mass));
        let x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

        let next = CartPoleState {
            x: s.x + self.tau * s.x_dot,
            x_dot: s.x_dot + self.tau * x_acc,
            theta: s.theta + self.tau * s.theta_dot,
            theta_dot: s.theta_dot + self.tau * theta_acc,
            steps: s.steps + 1,
        };
        let terminal = self.failed(&next) || next.steps >= self.max_steps;
        (next, 1.0, terminal)
    }

    pub fn state_features(&self, s: &CartPoleState) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("f0".to_string(), s.x),
            ("f1".to_string(), s.x_dot),
            ("f2".to_string(), s.theta),
            ("f3".to_string(), s.theta_dot),
        ])
    }

    /// Pole angular acceleration at a given state/action, exposed for tests.
    pub fn theta_acceleration(&self, s: &CartPoleState, action: usize) -> f64 {
        let force = if action == 1 { self.force_mag } else { -self.force_mag };
        let total_mass = self.masscart + self.masspole;
        let polemass_length = self.masspole * self.length;
        let cos_t = s.theta.cos();
        let sin_t = s.theta.sin();
        let temp = (force + polemass_length * s.theta_dot * s.theta_dot * sin_t) / total_mass;
        (self.gravity * sin_t - cos_t * temp)
            / (self.length * (4.0 / 3.0 - self.masspole * cos_t * cos_t / total_mass))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn theta_acceleration_from_zero_state_push_right() {
        let env = CartPole::default();
        // temp = 10/1.1; thetaacc = -(10/1.1) / (0.5*(4/3 - 0.1/1.1))
        let expected = -(10.0 / 1.1) / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let got = env.theta_acceleration(&CartPoleState::zero(), 1);
        assert!((got - expected).abs() < 1e-12);
        assert!((got + 14.634).abs() < 1e-2, "thetaacc = {got}");
    }

    #[test]
    fn trajectories_deterministic_given_seed() {
        let env = CartPole::default();
        let run = |seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut s = env.reset(&mut rng);
            let mut trace = Vec::new();
            for i in 0..50 {
                let (next, _, done) = env.step(&s, i % 2);
                trace.push(next);
                if done {
                    break;
                }
                s = next;
            }
            trace
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn always_push_right_fails_early() {
        let env = CartPole::default();
        let mut s = CartPoleState::zero();
        let mut steps = 0;
        loop {
            let (next, _, done) = env.step(&s, 1);
            steps += 1;
            if done {
                break;
            }
            s = next;
        }
        assert!(steps < env.max_steps, "lasted {steps} steps");
    }

    #[test]
    fn episode_capped_at_max_steps() {
        let mut env = CartPole::default();
        env.max_steps = 10;
        // alternating pushes keep the pole up long enough to hit the cap
        let mut s = CartPoleState::zero();
        let mut steps = 0;
        loop {
            let (next, r, done) = env.step(&s, steps % 2);
            assert_eq!(r, 1.0);
            steps += 1;
            if done {
                break;
            }
            s = next;
        }
        assert_eq!(steps, 10);
    }
}
