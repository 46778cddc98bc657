//! MAGIC: blends the model-based and importance-sampled j-step returns with
//! simplex weights chosen to minimize an estimated MSE (bootstrap covariance
//! plus a bias term measured against the confidence interval of the
//! full-horizon weighted doubly-robust estimate).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::estimators::j_step_returns;
use super::{sequential_denominator, CpeConfig, CpeError, CpeEstimate, EvalDataset, Prepared, Series};

/// Truncation indices: -1 (pure model), geometrically thinned prefixes, and
/// the full horizon.
pub(crate) fn default_j_set(max_horizon: usize) -> Vec<i64> {
    let full = max_horizon as i64 - 1;
    let mut js = vec![-1];
    let mut j = 0i64;
    while j < full {
        js.push(j);
        j = 2 * j + 1; // 0, 1, 3, 7, 15, ...
    }
    js.push(full);
    js
}

/// Distance from each component estimate to the nearest endpoint of the
/// full-horizon confidence interval; zero inside the interval.
pub(crate) fn bias_distances(g_hat: &[f64], ci: (f64, f64)) -> Vec<f64> {
    g_hat
        .iter()
        .map(|&g| {
            if g < ci.0 {
                ci.0 - g
            } else if g > ci.1 {
                g - ci.1
            } else {
                0.0
            }
        })
        .collect()
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        acc += u;
        let candidate = (acc - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&u| (u - tau).max(0.0)).collect()
}

/// argmin over the simplex of x' M x by projected gradient descent with a
/// fixed step of 1/L (L = largest diagonal entry), keeping the best iterate.
pub(crate) fn minimize_quadratic_on_simplex(m: &[Vec<f64>], iterations: usize) -> Vec<f64> {
    let n = m.len();
    let l = (0..n).map(|i| m[i][i]).fold(0.0_f64, f64::max).max(1e-12);
    let step = 1.0 / l;
    let objective = |x: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += x[i] * m[i][j] * x[j];
            }
        }
        total
    };
    let mut x = vec![1.0 / n as f64; n];
    let mut best = (objective(&x), x.clone());
    for _ in 0..iterations {
        let mut grad = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                grad[i] += 2.0 * m[i][j] * x[j];
            }
        }
        let moved: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi).collect();
        x = project_to_simplex(&moved);
        let value = objective(&x);
        if value < best.0 {
            best = (value, x.clone());
        }
    }
    best.1
}

/// MAGIC estimate over the default truncation-index set.
pub fn magic(
    ds: &EvalDataset,
    prepared: &Prepared,
    series: &Series,
    cfg: &CpeConfig,
) -> Result<CpeEstimate, CpeError> {
    let js = default_j_set(ds.max_horizon());
    magic_with_indices(ds, prepared, series, &js, cfg)
}

/// MAGIC estimate over an explicit truncation-index set. The set must hold
/// at least two indices; -1 and the full horizon are always included.
pub fn magic_with_indices(
    ds: &EvalDataset,
    prepared: &Prepared,
    series: &Series,
    js: &[i64],
    cfg: &CpeConfig,
) -> Result<CpeEstimate, CpeError> {
    let full = ds.max_horizon() as i64 - 1;
    let mut js: Vec<i64> = js.to_vec();
    if !js.contains(&-1) {
        js.push(-1);
    }
    if !js.contains(&full) {
        js.push(full);
    }
    js.sort_unstable();
    js.dedup();
    if js.len() < 2 {
        return Err(CpeError::TooFewIndices(js.len()));
    }
    let full_idx = js.iter().position(|&j| j == full).expect("full horizon present");

    // Per-episode contributions scaled so that the dataset estimate is their
    // mean; resampling these is the percentile bootstrap over episodes.
    let per_episode = j_step_returns(ds, prepared, series, &js)?;
    let n = per_episode.len();
    let scale = n as f64;
    let g_hat: Vec<f64> = (0..js.len())
        .map(|ji| per_episode.iter().map(|row| row[ji]).sum())
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let b = cfg.bootstrap_samples.max(2);
    let mut resampled = vec![vec![0.0; js.len()]; b];
    for row in resampled.iter_mut() {
        for _ in 0..n {
            let pick = rng.random_range(0..n);
            for (ji, slot) in row.iter_mut().enumerate() {
                *slot += scale * per_episode[pick][ji];
            }
        }
        for slot in row.iter_mut() {
            *slot /= n as f64;
        }
    }

    // Percentile confidence interval of the full-horizon estimate.
    let mut full_samples: Vec<f64> = resampled.iter().map(|row| row[full_idx]).collect();
    full_samples.sort_by(f64::total_cmp);
    let ci = (
        crate::stats::quantile_sorted(&full_samples, cfg.ci_low),
        crate::stats::quantile_sorted(&full_samples, cfg.ci_high),
    );
    let bias = bias_distances(&g_hat, ci);

    // Bootstrap covariance of the estimate vector, plus bias outer product
    // and a small ridge.
    let means: Vec<f64> = (0..js.len())
        .map(|ji| resampled.iter().map(|row| row[ji]).sum::<f64>() / b as f64)
        .collect();
    let mut m = vec![vec![0.0; js.len()]; js.len()];
    for row in &resampled {
        for i in 0..js.len() {
            for j in 0..js.len() {
                m[i][j] += (row[i] - means[i]) * (row[j] - means[j]);
            }
        }
    }
    for i in 0..js.len() {
        for j in 0..js.len() {
            m[i][j] = m[i][j] / b as f64 + bias[i] * bias[j];
        }
        m[i][i] += cfg.ridge;
    }

    let weights = minimize_quadratic_on_simplex(&m, cfg.magic_iterations);
    let raw: f64 = weights.iter().zip(&g_hat).map(|(w, g)| w * g).sum();
    Ok(CpeEstimate::new(
        "magic",
        series,
        raw,
        sequential_denominator(ds, series),
    ))
}
