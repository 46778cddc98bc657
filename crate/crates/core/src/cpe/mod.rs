//! Counterfactual policy evaluation.
//!
//! Shuffled evaluation samples are sorted back into episodes
//! (`collect_and_sort`), then six estimators score the target policy against
//! the logged data: the step-wise direct method, importance sampling, and
//! doubly-robust estimators, the sequential doubly-robust estimator in
//! ordinal and weighted-importance-sampling variants, and the MAGIC
//! estimator that blends model-based and importance-sampled partial returns.
//! Every estimate is reported raw and normalized by the logged policy's
//! empirical value (per-step mean for step-wise estimators, mean discounted
//! return for sequential ones), so 1.0 means parity with the logged policy.

mod estimators;
mod magic;

pub use estimators::{direct_method, ordinal_dr_episode_values, sequential_dr, stepwise_dr, stepwise_is, Weighting};
pub use magic::magic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CpeError {
    #[error("sample (mdp_id {mdp_id}, ordinal {ordinal}) duplicated")]
    DuplicateSample { mdp_id: String, ordinal: u64 },
    #[error("sample (mdp_id {mdp_id}, ordinal {ordinal}): {reason}")]
    InvalidSample {
        mdp_id: String,
        ordinal: u64,
        reason: String,
    },
    #[error("dataset has no episodes")]
    Empty,
    #[error("all cumulative importance weights vanished at step {step}; no episode survives the weighting")]
    WeightsVanish { step: usize },
    #[error("MAGIC needs at least two return indices, got {0}")]
    TooFewIndices(usize),
}

/// One evaluation sample: logged outcome plus target-policy propensities and
/// model Q-values over the step's possible actions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStep {
    pub mdp_id: String,
    pub ordinal: u64,
    pub reward: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub logged_propensity: f64,
    /// Index of the logged action within the possible-action vectors below.
    pub logged_action: usize,
    pub target_propensities: Vec<f64>,
    pub q_values: Vec<f64>,
    pub terminal: bool,
}

impl EvalStep {
    fn validate(&self) -> Result<(), CpeError> {
        let invalid = |reason: String| CpeError::InvalidSample {
            mdp_id: self.mdp_id.clone(),
            ordinal: self.ordinal,
            reason,
        };
        if !(self.logged_propensity > 0.0 && self.logged_propensity <= 1.0) {
            return Err(invalid(format!(
                "logged propensity must be in (0, 1], got {}",
                self.logged_propensity
            )));
        }
        if self.target_propensities.len() != self.q_values.len() {
            return Err(invalid("target propensities and Q-values differ in length".into()));
        }
        if self.logged_action >= self.target_propensities.len() {
            return Err(invalid("logged action index out of range".into()));
        }
        let total: f64 = self.target_propensities.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("target propensities sum to {total}")));
        }
        Ok(())
    }

    /// State value under the target policy: sum_a pi_e(a|s) * Q(s, a).
    pub fn state_value(&self) -> f64 {
        self.target_propensities
            .iter()
            .zip(&self.q_values)
            .map(|(p, q)| p * q)
            .sum()
    }

    /// Q-value of the logged action.
    pub fn logged_q(&self) -> f64 {
        self.q_values[self.logged_action]
    }
}

/// Episodes in original order, ready for the sequential estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDataset {
    pub episodes: Vec<Vec<EvalStep>>,
    pub gamma: f64,
}

impl EvalDataset {
    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn max_horizon(&self) -> usize {
        self.episodes.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Metric names present on any step.
    pub fn metric_names(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for ep in &self.episodes {
            for step in ep {
                names.extend(step.metrics.keys().cloned());
            }
        }
        names
    }
}

/// Reassemble shuffled evaluation samples into ordinal-sorted episodes.
/// Episode order follows first appearance of each mdp_id.
pub fn collect_and_sort(samples: Vec<EvalStep>, gamma: f64) -> Result<EvalDataset, CpeError> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<EvalStep>> = BTreeMap::new();
    for step in samples {
        step.validate()?;
        if !grouped.contains_key(&step.mdp_id) {
            order.push(step.mdp_id.clone());
        }
        grouped.entry(step.mdp_id.clone()).or_default().push(step);
    }
    if order.is_empty() {
        return Err(CpeError::Empty);
    }
    let mut episodes = Vec::with_capacity(order.len());
    for mdp_id in order {
        let mut steps = grouped.remove(&mdp_id).expect("grouped above");
        steps.sort_by_key(|s| s.ordinal);
        for pair in steps.windows(2) {
            if pair[0].ordinal == pair[1].ordinal {
                return Err(CpeError::DuplicateSample {
                    mdp_id,
                    ordinal: pair[0].ordinal,
                });
            }
        }
        episodes.push(steps);
    }
    Ok(EvalDataset { episodes, gamma })
}

/// Which value sequence an estimator scores: the shaped reward or one named
/// metric from the metrics map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Series {
    Reward,
    Metric(String),
}

impl Series {
    pub fn label(&self) -> String {
        match self {
            Series::Reward => "reward".to_string(),
            Series::Metric(name) => format!("metric/{name}"),
        }
    }

    pub fn value(&self, step: &EvalStep) -> f64 {
        match self {
            Series::Reward => step.reward,
            Series::Metric(name) => step.metrics.get(name).copied().unwrap_or(0.0),
        }
    }
}

/// One estimator's output for one series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpeEstimate {
    pub estimator: String,
    pub metric: String,
    pub raw: f64,
    /// raw / logged-policy empirical value; absent when the logged value is 0.
    pub normalized: Option<f64>,
}

impl CpeEstimate {
    pub(crate) fn new(estimator: &str, series: &Series, raw: f64, denom: f64) -> Self {
        CpeEstimate {
            estimator: estimator.to_string(),
            metric: series.label(),
            raw,
            normalized: if denom != 0.0 && denom.is_finite() {
                Some(raw / denom)
            } else {
                None
            },
        }
    }
}

/// Estimator names, in report order.
pub const ESTIMATOR_NAMES: [&str; 6] = [
    "direct_method",
    "stepwise_is",
    "stepwise_dr",
    "sequential_dr",
    "weighted_dr",
    "magic",
];

/// Tuning knobs shared by the estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CpeConfig {
    /// Cap on individual importance ratios; `None` disables capping (used by
    /// the oracle tests where propensities are exact).
    pub rho_cap: Option<f64>,
    /// Bootstrap resamples for MAGIC's covariance and confidence interval.
    pub bootstrap_samples: usize,
    /// Percentile bounds of the bootstrap confidence interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Projected-gradient iterations for MAGIC's simplex weights.
    pub magic_iterations: usize,
    /// Ridge added to the estimated covariance.
    pub ridge: f64,
    /// Seed for the bootstrap resampler.
    pub seed: u64,
}

impl Default for CpeConfig {
    fn default() -> Self {
        CpeConfig {
            rho_cap: Some(1e4),
            bootstrap_samples: 200,
            ci_low: 0.05,
            ci_high: 0.95,
            magic_iterations: 500,
            ridge: 1e-8,
            seed: 0,
        }
    }
}

/// Per-episode importance ratios and cumulative weights, computed once and
/// shared by all estimators.
pub struct Prepared {
    pub rho: Vec<Vec<f64>>,
    pub cum: Vec<Vec<f64>>,
    pub capped_ratios: usize,
}

/// Compute the importance ratios and cumulative weights once for a dataset.
pub fn prepare(ds: &EvalDataset, cfg: &CpeConfig) -> Prepared {
    let mut rho = Vec::with_capacity(ds.episodes.len());
    let mut cum = Vec::with_capacity(ds.episodes.len());
    let mut capped = 0usize;
    for ep in &ds.episodes {
        let mut r = Vec::with_capacity(ep.len());
        let mut c = Vec::with_capacity(ep.len());
        let mut acc = 1.0;
        for step in ep {
            let mut ratio = step.target_propensities[step.logged_action] / step.logged_propensity;
            if let Some(cap) = cfg.rho_cap {
                if ratio > cap {
                    ratio = cap;
                    capped += 1;
                }
            }
            acc *= ratio;
            r.push(ratio);
            c.push(acc);
        }
        rho.push(r);
        cum.push(c);
    }
    if capped > 0 {
        log::warn!("capped {capped} importance ratio(s) at the configured bound");
    }
    Prepared {
        rho,
        cum,
        capped_ratios: capped,
    }
}

/// Logged-policy empirical value: per-step mean of the series.
pub(crate) fn stepwise_denominator(ds: &EvalDataset, series: &Series) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ep in &ds.episodes {
        for step in ep {
            total += series.value(step);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Logged-policy empirical value: mean discounted episode return.
pub(crate) fn sequential_denominator(ds: &EvalDataset, series: &Series) -> f64 {
    let mut total = 0.0;
    for ep in &ds.episodes {
        let mut discount = 1.0;
        for step in ep {
            total += discount * series.value(step);
            discount *= ds.gamma;
        }
    }
    total / ds.num_episodes() as f64
}

/// Run all six estimators for the shaped reward and every logged metric.
pub fn cpe_report(ds: &EvalDataset, cfg: &CpeConfig) -> Result<Vec<CpeEstimate>, CpeError> {
    let mut series_list = vec![Series::Reward];
    for name in ds.metric_names() {
        series_list.push(Series::Metric(name));
    }
    let prepared = prepare(ds, cfg);
    let mut out = Vec::with_capacity(series_list.len() * ESTIMATOR_NAMES.len());
    for series in &series_list {
        out.push(direct_method(ds, series));
        out.push(stepwise_is(ds, &prepared, series));
        out.push(stepwise_dr(ds, &prepared, series));
        out.push(sequential_dr(ds, &prepared, series, Weighting::Ordinal)?);
        out.push(sequential_dr(ds, &prepared, series, Weighting::Weighted)?);
        out.push(magic(ds, &prepared, series, cfg)?);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use test_support::*;

    #[test]
    fn collect_and_sort_restores_order() {
        let mut steps = Vec::new();
        for ep in 0..3 {
            for t in (1..=4).rev() {
                let mut s = one_step(&format!("e{ep}"), 1.0, 0.5, 0, [0.5, 0.5], [0.0, 0.0]);
                s.ordinal = t;
                s.terminal = t == 4;
                steps.push(s);
            }
        }
        let ds = collect_and_sort(steps, 0.9).unwrap();
        assert_eq!(ds.num_episodes(), 3);
        for ep in &ds.episodes {
            let ordinals: Vec<u64> = ep.iter().map(|s| s.ordinal).collect();
            assert_eq!(ordinals, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn single_step_episodes_are_valid() {
        let ds = collect_and_sort(
            vec![one_step("a", 1.0, 1.0, 0, [1.0, 0.0], [0.5, 0.5])],
            1.0,
        )
        .unwrap();
        assert_eq!(ds.max_horizon(), 1);
    }

    #[test]
    fn duplicate_sample_rejected() {
        let steps = vec![
            one_step("a", 1.0, 0.5, 0, [0.5, 0.5], [0.0, 0.0]),
            one_step("a", 2.0, 0.5, 0, [0.5, 0.5], [0.0, 0.0]),
        ];
        assert!(matches!(
            collect_and_sort(steps, 1.0),
            Err(CpeError::DuplicateSample { .. })
        ));
    }

    #[test]
    fn invalid_propensities_rejected() {
        let mut bad = one_step("a", 1.0, 0.5, 0, [0.5, 0.5], [0.0, 0.0]);
        bad.logged_propensity = 0.0;
        assert!(collect_and_sort(vec![bad], 1.0).is_err());

        let mut bad = one_step("a", 1.0, 0.5, 0, [0.9, 0.5], [0.0, 0.0]);
        bad.target_propensities = vec![0.9, 0.5];
        assert!(collect_and_sort(vec![bad], 1.0).is_err());
    }

    #[test]
    fn report_cardinality_metrics_plus_reward() {
        let mut s1 = one_step("a", 1.0, 0.5, 0, [0.5, 0.5], [1.0, 1.0]);
        s1.metrics.insert("click".to_string(), 1.0);
        s1.metrics.insert("session".to_string(), 3.0);
        let mut s2 = one_step("b", 2.0, 0.5, 1, [0.5, 0.5], [1.0, 1.0]);
        s2.metrics.insert("click".to_string(), 0.0);
        s2.metrics.insert("session".to_string(), 1.0);
        let ds = dataset(vec![s1, s2], 1.0);
        let report = cpe_report(&ds, &CpeConfig::default()).unwrap();
        // 6 estimators x (reward + 2 metrics)
        assert_eq!(report.len(), 18);
        let series: BTreeSet<String> = report.iter().map(|e| e.metric.clone()).collect();
        assert_eq!(series.len(), 3);
        assert!(series.contains("reward"));
        assert!(series.contains("metric/click"));
        assert!(series.contains("metric/session"));
    }

    #[test]
    fn normalization_divides_by_logged_value() {
        // estimate 1.5 against logged empirical value 1.0
        let est = CpeEstimate::new("x", &Series::Reward, 1.5, 1.0);
        assert_eq!(est.normalized, Some(1.5));
        let est = CpeEstimate::new("x", &Series::Reward, 1.5, 0.0);
        assert_eq!(est.normalized, None);
    }
}
