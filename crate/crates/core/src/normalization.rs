//! Feature identification and normalization.
//!
//! Each feature is identified as one of six kinds (binary, probability,
//! continuous, enum, quantile, boxcox), fitted offline into a
//! `NormalizationSpec`, and applied lazily inside the model forward pass via
//! `Preprocessor`. Fitting is per-feature and parallelizes; applying is pure.
//!
//! Identification runs a fixed cascade over the observed samples:
//!  1. value set within {0, 1}            -> binary
//!  2. all in [0, 1], many distinct       -> probability
//!  3. few distinct, all integral         -> enum
//!  4. all positive, heavily skewed       -> boxcox
//!  5. IQR/stddev ratio out of range      -> quantile
//!  6. otherwise                          -> continuous
//!
//! The thresholds are configurable; the defaults are in `IdentifyConfig`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;
use crate::threads;

#[derive(Debug, Error)]
pub enum NormalizationError {
    #[error("feature {feature_id}: {got} samples, need at least {min}; pass an explicit kind override to normalize it anyway")]
    TooFewSamples {
        feature_id: String,
        got: usize,
        min: usize,
    },
    #[error("duplicate feature_id {0} in preprocessor specs")]
    DuplicateFeature(String),
    #[error("feature {feature_id}: {reason}")]
    InvalidSpec { feature_id: String, reason: String },
}

/// The six feature kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    Probability,
    Continuous,
    Enum,
    Quantile,
    Boxcox,
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(FeatureKind::Binary),
            "probability" => Ok(FeatureKind::Probability),
            "continuous" => Ok(FeatureKind::Continuous),
            "enum" => Ok(FeatureKind::Enum),
            "quantile" => Ok(FeatureKind::Quantile),
            "boxcox" => Ok(FeatureKind::Boxcox),
            other => Err(format!("unknown feature kind {other:?}")),
        }
    }
}

/// Kind-specific transform parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Transform {
    Binary,
    Probability,
    Continuous {
        mean: f64,
        stddev: f64,
        clip_min: f64,
        clip_max: f64,
    },
    Boxcox {
        lambda: f64,
        post_mean: f64,
        post_stddev: f64,
    },
    Quantile {
        quantiles: Vec<f64>,
    },
    Enum {
        values: Vec<f64>,
    },
}

impl Transform {
    pub fn kind(&self) -> FeatureKind {
        match self {
            Transform::Binary => FeatureKind::Binary,
            Transform::Probability => FeatureKind::Probability,
            Transform::Continuous { .. } => FeatureKind::Continuous,
            Transform::Boxcox { .. } => FeatureKind::Boxcox,
            Transform::Quantile { .. } => FeatureKind::Quantile,
            Transform::Enum { .. } => FeatureKind::Enum,
        }
    }

    /// Output width in the dense feature vector: |values| for enums, 1 otherwise.
    pub fn width(&self) -> usize {
        match self {
            Transform::Enum { values } => values.len(),
            _ => 1,
        }
    }
}

/// A fitted per-feature normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub feature_id: String,
    #[serde(flatten)]
    pub transform: Transform,
}

/// Identification cascade thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub min_samples: usize,
    pub enum_threshold: usize,
    pub skew_threshold: f64,
    pub iqr_ratio_min: f64,
    pub iqr_ratio_max: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            min_samples: 100,
            enum_threshold: 32,
            skew_threshold: 2.0,
            iqr_ratio_min: 0.5,
            iqr_ratio_max: 2.5,
        }
    }
}

/// Fit parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of stored quantile intervals (B); B+1 points are kept.
    pub quantile_resolution: usize,
    /// Continuous clipping half-width, in fitted standard deviations.
    pub clip_sigmas: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            quantile_resolution: 1000,
            clip_sigmas: 10.0,
        }
    }
}

const LOGIT_CLAMP: f64 = 6.0;
const QUANTILE_CLAMP: f64 = 3.0;
const BOXCOX_INPUT_FLOOR: f64 = 1e-10;

fn distinct_sorted(samples: &[f64]) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
}

fn is_integral(v: f64) -> bool {
    v.fract() == 0.0 && v.abs() < 2f64.powi(53)
}

/// Decide a feature's kind from observed non-missing samples.
pub fn identify_feature(
    feature_id: &str,
    samples: &[f64],
    cfg: &IdentifyConfig,
) -> Result<FeatureKind, NormalizationError> {
    if samples.len() < cfg.min_samples {
        return Err(NormalizationError::TooFewSamples {
            feature_id: feature_id.to_string(),
            got: samples.len(),
            min: cfg.min_samples,
        });
    }
    let distinct = distinct_sorted(samples);

    if distinct.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Ok(FeatureKind::Binary);
    }
    if distinct.iter().all(|&v| (0.0..=1.0).contains(&v)) && distinct.len() > cfg.enum_threshold {
        return Ok(FeatureKind::Probability);
    }
    if distinct.len() <= cfg.enum_threshold && distinct.iter().all(|&v| is_integral(v)) {
        return Ok(FeatureKind::Enum);
    }
    if distinct[0] > 0.0 && stats::sample_skewness(samples).abs() > cfg.skew_threshold {
        return Ok(FeatureKind::Boxcox);
    }
    let stddev = stats::sample_stddev(samples);
    if stddev > 0.0 {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
        let ratio = iqr / stddev;
        if ratio < cfg.iqr_ratio_min || ratio > cfg.iqr_ratio_max {
            return Ok(FeatureKind::Quantile);
        }
    }
    Ok(FeatureKind::Continuous)
}

fn boxcox_transform(x: f64, lambda: f64) -> f64 {
    let x = x.max(BOXCOX_INPUT_FLOOR);
    if lambda.abs() < 1e-9 {
        x.ln()
    } else {
        (x.powf(lambda) - 1.0) / lambda
    }
}

/// Box-Cox log-likelihood maximized over a lambda grid [-2, 2] step 0.01.
fn fit_boxcox_lambda(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let log_sum: f64 = samples.iter().map(|x| x.ln()).sum();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut step = 0;
    loop {
        let lambda = -2.0 + 0.01 * step as f64;
        if lambda > 2.0 + 1e-12 {
            break;
        }
        let transformed: Vec<f64> = samples.iter().map(|&x| boxcox_transform(x, lambda)).collect();
        let var = stats::population_variance(&transformed).max(1e-300);
        let ll = -0.5 * n * var.ln() + (lambda - 1.0) * log_sum;
        if ll > best.0 {
            best = (ll, lambda);
        }
        step += 1;
    }
    best.1
}

fn fit_continuous(samples: &[f64], cfg: &FitConfig) -> Transform {
    let mean = stats::mean(samples);
    let mut stddev = stats::sample_stddev(samples);
    if stddev < 1e-12 {
        stddev = 1.0; // constant feature maps to 0
    }
    Transform::Continuous {
        mean,
        stddev,
        clip_min: mean - cfg.clip_sigmas * stddev,
        clip_max: mean + cfg.clip_sigmas * stddev,
    }
}

/// Fit transform parameters for a feature of a known (or overridden) kind.
pub fn fit_spec(
    feature_id: &str,
    samples: &[f64],
    kind: FeatureKind,
    cfg: &FitConfig,
) -> NormalizationSpec {
    let transform = match kind {
        FeatureKind::Binary => Transform::Binary,
        FeatureKind::Probability => Transform::Probability,
        FeatureKind::Continuous => fit_continuous(samples, cfg),
        FeatureKind::Boxcox => {
            if samples.iter().any(|&x| x <= 0.0) {
                log::warn!(
                    "feature {feature_id}: boxcox requires positive samples, falling back to continuous"
                );
                fit_continuous(samples, cfg)
            } else {
                let lambda = fit_boxcox_lambda(samples);
                let transformed: Vec<f64> =
                    samples.iter().map(|&x| boxcox_transform(x, lambda)).collect();
                let mut post_stddev = stats::sample_stddev(&transformed);
                if post_stddev < 1e-12 {
                    post_stddev = 1.0;
                }
                Transform::Boxcox {
                    lambda,
                    post_mean: stats::mean(&transformed),
                    post_stddev,
                }
            }
        }
        FeatureKind::Quantile => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            let b = cfg.quantile_resolution;
            let quantiles: Vec<f64> = (0..=b)
                .map(|i| stats::quantile_sorted(&sorted, i as f64 / b as f64))
                .collect();
            Transform::Quantile { quantiles }
        }
        FeatureKind::Enum => Transform::Enum {
            values: distinct_sorted(samples),
        },
    };
    NormalizationSpec {
        feature_id: feature_id.to_string(),
        transform,
    }
}

fn apply_scalar(value: f64, transform: &Transform) -> f64 {
    match transform {
        Transform::Binary => value,
        Transform::Probability => {
            if value <= 0.0 {
                -LOGIT_CLAMP
            } else if value >= 1.0 {
                LOGIT_CLAMP
            } else {
                (value / (1.0 - value)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            }
        }
        Transform::Continuous {
            mean,
            stddev,
            clip_min,
            clip_max,
        } => (value.clamp(*clip_min, *clip_max) - mean) / stddev,
        Transform::Boxcox {
            lambda,
            post_mean,
            post_stddev,
        } => (boxcox_transform(value, *lambda) - post_mean) / post_stddev,
        Transform::Quantile { quantiles } => {
            let b = quantiles.len() - 1;
            let u = cdf_position(value, quantiles) / b as f64;
            stats::inverse_normal_cdf(u).clamp(-QUANTILE_CLAMP, QUANTILE_CLAMP)
        }
        Transform::Enum { .. } => unreachable!("enum handled by apply_spec"),
    }
}

/// Fractional index of `value` within the stored quantiles, with ties mapped
/// to the middle of their plateau and linear interpolation in between.
fn cdf_position(value: f64, quantiles: &[f64]) -> f64 {
    let n = quantiles.len();
    if value <= quantiles[0] {
        if value == quantiles[0] {
            // plateau at the left edge
            let hi = quantiles.partition_point(|&q| q <= value);
            return (hi as f64 - 1.0) / 2.0;
        }
        return 0.0;
    }
    if value >= quantiles[n - 1] {
        if value == quantiles[n - 1] {
            let lo = quantiles.partition_point(|&q| q < value);
            return (lo as f64 + (n - 1) as f64) / 2.0;
        }
        return (n - 1) as f64;
    }
    let lo = quantiles.partition_point(|&q| q < value);
    let hi = quantiles.partition_point(|&q| q <= value);
    if lo < hi {
        // value sits exactly on one or more stored quantiles
        return (lo as f64 + hi as f64 - 1.0) / 2.0;
    }
    // quantiles[lo-1] < value < quantiles[lo]
    let left = quantiles[lo - 1];
    let right = quantiles[lo];
    (lo - 1) as f64 + (value - left) / (right - left)
}

/// Apply one spec to one value; output width is 1 except for enums.
pub fn apply_spec(value: f64, spec: &NormalizationSpec) -> Vec<f64> {
    match &spec.transform {
        Transform::Enum { values } => {
            let mut out = vec![0.0; values.len()];
            if let Some(pos) = values.iter().position(|&v| v == value) {
                out[pos] = 1.0;
            }
            out
        }
        other => vec![apply_scalar(value, other)],
    }
}

/// Immutable dense-vector encoder over an ordered list of specs.
///
/// Output layout assigns each feature a contiguous (offset, width) slot in
/// spec order. Missing features produce zero-filled slots. The batched path
/// groups columns by kind but runs the same scalar transform per element, so
/// batched and per-row outputs are bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preprocessor {
    specs: Vec<NormalizationSpec>,
    layout: BTreeMap<String, (usize, usize)>,
    width: usize,
}

impl Preprocessor {
    pub fn build(mut specs: Vec<NormalizationSpec>) -> Result<Self, NormalizationError> {
        specs.sort_by(|a, b| a.feature_id.cmp(&b.feature_id));
        let mut layout = BTreeMap::new();
        let mut offset = 0usize;
        for spec in &specs {
            validate_spec(spec)?;
            let width = spec.transform.width();
            if layout.insert(spec.feature_id.clone(), (offset, width)).is_some() {
                return Err(NormalizationError::DuplicateFeature(spec.feature_id.clone()));
            }
            offset += width;
        }
        Ok(Preprocessor {
            specs,
            layout,
            width: offset,
        })
    }

    pub fn output_width(&self) -> usize {
        self.width
    }

    pub fn specs(&self) -> &[NormalizationSpec] {
        &self.specs
    }

    pub fn layout(&self) -> &BTreeMap<String, (usize, usize)> {
        &self.layout
    }

    pub fn transform_row(&self, features: &BTreeMap<String, f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for spec in &self.specs {
            if let Some(&value) = features.get(&spec.feature_id) {
                let (offset, _) = self.layout[&spec.feature_id];
                match &spec.transform {
                    Transform::Enum { values } => {
                        if let Some(pos) = values.iter().position(|&v| v == value) {
                            out[offset + pos] = 1.0;
                        }
                    }
                    other => out[offset] = apply_scalar(value, other),
                }
            }
        }
        out
    }

    /// Transform a batch of rows into an N x width matrix, processing each
    /// kind's features as a column group.
    pub fn transform_batch(&self, rows: &[&BTreeMap<String, f64>]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.width));
        let kind_order = [
            FeatureKind::Binary,
            FeatureKind::Probability,
            FeatureKind::Continuous,
            FeatureKind::Boxcox,
            FeatureKind::Quantile,
            FeatureKind::Enum,
        ];
        for kind in kind_order {
            for spec in self.specs.iter().filter(|s| s.transform.kind() == kind) {
                let (offset, _) = self.layout[&spec.feature_id];
                for (r, row) in rows.iter().enumerate() {
                    if let Some(&value) = row.get(&spec.feature_id) {
                        match &spec.transform {
                            Transform::Enum { values } => {
                                if let Some(pos) = values.iter().position(|&v| v == value) {
                                    out[[r, offset + pos]] = 1.0;
                                }
                            }
                            other => out[[r, offset]] = apply_scalar(value, other),
                        }
                    }
                }
            }
        }
        out
    }
}

fn validate_spec(spec: &NormalizationSpec) -> Result<(), NormalizationError> {
    let invalid = |reason: &str| NormalizationError::InvalidSpec {
        feature_id: spec.feature_id.clone(),
        reason: reason.to_string(),
    };
    match &spec.transform {
        Transform::Continuous { stddev, .. } if *stddev <= 0.0 => {
            Err(invalid("stddev must be positive"))
        }
        Transform::Boxcox { post_stddev, .. } if *post_stddev <= 0.0 => {
            Err(invalid("post_stddev must be positive"))
        }
        Transform::Quantile { quantiles } => {
            if quantiles.len() < 2 {
                return Err(invalid("need at least two quantile points"));
            }
            if quantiles.windows(2).any(|w| w[1] < w[0]) {
                return Err(invalid("quantiles must be non-decreasing"));
            }
            Ok(())
        }
        Transform::Enum { values } => {
            if values.is_empty() {
                return Err(invalid("enum value list must be non-empty"));
            }
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() != values.len() {
                return Err(invalid("enum values must be duplicate-free"));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Result of fitting a whole dataset's features.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub specs: Vec<NormalizationSpec>,
    /// Features skipped for having fewer than `min_samples` observations.
    pub skipped: Vec<(String, usize)>,
}

/// Fit specs for every feature observed across `rows`, using at most
/// `sample_limit` uniformly sampled rows. Overrides force a kind and bypass
/// the sample-count requirement.
pub fn fit_dataset(
    rows: &[&BTreeMap<String, f64>],
    sample_limit: usize,
    seed: u64,
    overrides: &BTreeMap<String, FeatureKind>,
    identify_cfg: &IdentifyConfig,
    fit_cfg: &FitConfig,
) -> FitReport {
    let sampled: Vec<&BTreeMap<String, f64>> = if rows.len() > sample_limit {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..rows.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(sample_limit);
        indices.sort_unstable();
        indices.into_iter().map(|i| rows[i]).collect()
    } else {
        rows.to_vec()
    };

    let mut by_feature: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &sampled {
        for (id, &value) in row.iter() {
            by_feature.entry(id.clone()).or_default().push(value);
        }
    }

    let jobs: Vec<(String, Vec<f64>)> = by_feature.into_iter().collect();
    let results = threads::ordered_map(jobs, |(id, samples)| {
        let kind = match overrides.get(&id) {
            Some(&kind) => Ok(kind),
            None => identify_feature(&id, &samples, identify_cfg),
        };
        match kind {
            Ok(kind) => Ok(fit_spec(&id, &samples, kind, fit_cfg)),
            Err(_) => Err((id, samples.len())),
        }
    });

    let mut specs = Vec::new();
    let mut skipped = Vec::new();
    for result in results {
        match result {
            Ok(spec) => specs.push(spec),
            Err(pair) => {
                log::warn!(
                    "feature {}: only {} samples (< {}), skipping; use an override to include it",
                    pair.0,
                    pair.1,
                    identify_cfg.min_samples
                );
                skipped.push(pair);
            }
        }
    }
    FitReport { specs, skipped }
}

/// Serialize specs as a JSON map feature_id -> {kind, params}.
pub fn specs_to_json(specs: &[NormalizationSpec]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for spec in specs {
        let body = serde_json::to_value(&spec.transform).expect("serializable transform");
        map.insert(spec.feature_id.clone(), body);
    }
    serde_json::Value::Object(map)
}

/// Parse the JSON map form back into specs.
pub fn specs_from_json(value: &serde_json::Value) -> Result<Vec<NormalizationSpec>, String> {
    let obj = value.as_object().ok_or("normalization file must be a JSON object")?;
    let mut specs = Vec::with_capacity(obj.len());
    for (feature_id, body) in obj {
        let transform: Transform = serde_json::from_value(body.clone())
            .map_err(|e| format!("feature {feature_id}: {e}"))?;
        specs.push(NormalizationSpec {
            feature_id: feature_id.clone(),
            transform,
        });
    }
    Ok(specs)
}
