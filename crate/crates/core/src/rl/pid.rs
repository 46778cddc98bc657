//! PID controller that steers the send/drop threshold so the observed send
//! rate tracks a target rate. Sending too much raises the threshold.

use serde::{Deserialize, Serialize};

const THRESHOLD_MIN: f64 = 0.001;
const THRESHOLD_MAX: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidController {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub target_rate: f64,
    pub integral: f64,
    pub prev_error: f64,
    pub threshold: f64,
}

impl PidController {
    pub fn new(kp: f64, ki: f64, kd: f64, target_rate: f64, initial_threshold: f64) -> Self {
        assert!(
            target_rate > 0.0 && target_rate < 1.0,
            "target rate must be in (0, 1)"
        );
        PidController {
            kp,
            ki,
            kd,
            target_rate,
            integral: 0.0,
            prev_error: 0.0,
            threshold: initial_threshold.clamp(THRESHOLD_MIN, THRESHOLD_MAX),
        }
    }

    /// Update the threshold from an observed send rate in [0, 1].
    pub fn update(&mut self, observed_send_rate: f64) {
        let error = observed_send_rate - self.target_rate;
        self.integral += error;
        let derivative = error - self.prev_error;
        self.prev_error = error;
        let delta = self.kp * error + self.ki * self.integral + self.kd * derivative;
        self.threshold = (self.threshold + delta).clamp(THRESHOLD_MIN, THRESHOLD_MAX);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_step_matches_sign_convention() {
        let mut pid = PidController::new(0.5, 0.0, 0.0, 0.5, 0.5);
        pid.update(0.6); // sending too much -> threshold rises by 0.5 * 0.1
        assert!((pid.threshold - 0.55).abs() < 1e-12);
    }

    #[test]
    fn on_target_leaves_threshold_unchanged() {
        let mut pid = PidController::new(0.5, 0.05, 0.1, 0.3, 0.4);
        pid.update(0.3);
        assert!((pid.threshold - 0.4).abs() < 1e-12);
    }

    #[test]
    fn threshold_stays_clamped() {
        let mut pid = PidController::new(10.0, 0.0, 0.0, 0.5, 0.9);
        for _ in 0..20 {
            pid.update(1.0);
        }
        assert_eq!(pid.threshold, 0.999);
        for _ in 0..40 {
            pid.update(0.0);
        }
        assert_eq!(pid.threshold, 0.001);
    }

    #[test]
    fn monotone_in_observed_rate_without_derivative() {
        // larger observed rate never yields a smaller threshold (Kd = 0, Ki >= 0)
        let base = PidController::new(0.4, 0.1, 0.0, 0.5, 0.5);
        let mut prev = None;
        for i in 0..=10 {
            let mut pid = base.clone();
            pid.update(i as f64 / 10.0);
            if let Some(p) = prev {
                assert!(pid.threshold >= p);
            }
            prev = Some(pid.threshold);
        }
    }

    #[test]
    fn converges_on_stationary_score_stream() {
        // fixed score distribution; the send rate is the fraction of scores
        // above the threshold
        let scores: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let mut pid = PidController::new(0.5, 0.05, 0.0, 0.3, 0.5);
        let mut rate = 0.0;
        for _ in 0..50 {
            rate = scores.iter().filter(|&&s| s >= pid.threshold).count() as f64
                / scores.len() as f64;
            pid.update(rate);
        }
        assert!((rate - 0.3).abs() <= 0.02, "final rate {rate}");
    }
}
