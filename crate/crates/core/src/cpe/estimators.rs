//! Step-wise and sequential doubly-robust estimators.

use super::{
    sequential_denominator, stepwise_denominator, CpeError, CpeEstimate, EvalDataset, Prepared,
    Series,
};

/// Model-only estimate: per-step mean of the target-policy state value.
pub fn direct_method(ds: &EvalDataset, series: &Series) -> CpeEstimate {
    let mut total = 0.0;
    let mut count = 0usize;
    for ep in &ds.episodes {
        for step in ep {
            total += step.state_value();
            count += 1;
        }
    }
    let raw = if count == 0 { 0.0 } else { total / count as f64 };
    CpeEstimate::new("direct_method", series, raw, stepwise_denominator(ds, series))
}

/// Per-step importance sampling: mean of rho_t * value_t.
pub fn stepwise_is(ds: &EvalDataset, prepared: &Prepared, series: &Series) -> CpeEstimate {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ep) in ds.episodes.iter().enumerate() {
        for (t, step) in ep.iter().enumerate() {
            total += prepared.rho[i][t] * series.value(step);
            count += 1;
        }
    }
    let raw = if count == 0 { 0.0 } else { total / count as f64 };
    CpeEstimate::new("stepwise_is", series, raw, stepwise_denominator(ds, series))
}

/// Per-step doubly robust: mean of V(s) + rho * (value - Q(s, a)).
pub fn stepwise_dr(ds: &EvalDataset, prepared: &Prepared, series: &Series) -> CpeEstimate {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ep) in ds.episodes.iter().enumerate() {
        for (t, step) in ep.iter().enumerate() {
            total += step.state_value()
                + prepared.rho[i][t] * (series.value(step) - step.logged_q());
            count += 1;
        }
    }
    let raw = if count == 0 { 0.0 } else { total / count as f64 };
    CpeEstimate::new("stepwise_dr", series, raw, stepwise_denominator(ds, series))
}

/// Importance-sampling flavor of the sequential doubly-robust estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Per-episode ordinal importance sampling (backward recursion, mean
    /// over episodes).
    Ordinal,
    /// Weighted importance sampling: cumulative weights normalized across
    /// episodes at each step.
    Weighted,
}

/// Per-episode value of the ordinal sequential DR recursion:
/// v_t = V(s_t) + rho_t * (value_t + gamma * v_{t+1} - Q(s_t, a_t)).
pub fn ordinal_dr_episode_values(
    ds: &EvalDataset,
    prepared: &Prepared,
    series: &Series,
) -> Vec<f64> {
    ds.episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut v = 0.0;
            for (t, step) in ep.iter().enumerate().rev() {
                v = step.state_value()
                    + prepared.rho[i][t] * (series.value(step) + ds.gamma * v - step.logged_q());
            }
            v
        })
        .collect()
}

/// Per-step cumulative weights normalized across episodes, with the weight
/// of a finished episode carried forward. Row layout: `[episode][step]`,
/// padded to the longest horizon. Errors if no weight survives at some step.
pub(crate) fn normalized_weights(
    ds: &EvalDataset,
    prepared: &Prepared,
) -> Result<Vec<Vec<f64>>, CpeError> {
    let horizon = ds.max_horizon();
    let n = ds.num_episodes();
    let mut carried: Vec<Vec<f64>> = Vec::with_capacity(n);
    for cum in &prepared.cum {
        let mut row = Vec::with_capacity(horizon);
        let mut last = 1.0;
        for t in 0..horizon {
            if t < cum.len() {
                last = cum[t];
            }
            row.push(last);
        }
        carried.push(row);
    }
    let mut normalized = vec![vec![0.0; horizon]; n];
    for t in 0..horizon {
        let total: f64 = carried.iter().map(|row| row[t]).sum();
        if total <= 0.0 {
            return Err(CpeError::WeightsVanish { step: t });
        }
        for i in 0..n {
            normalized[i][t] = carried[i][t] / total;
        }
    }
    Ok(normalized)
}

/// Off-policy j-step returns per episode, the building block shared by the
/// weighted sequential DR estimator (j = horizon - 1) and MAGIC.
///
/// For each episode i and truncation index j (j = -1 is the pure model
/// estimate), computes
///   g_i(j) = sum_{t<=j} gamma^t w_t r_t + gamma^{j+1} w_j V(s_{j+1})
///            - sum_{t<=j} gamma^t (w_t Q(s_t,a_t) - w_{t-1} V(s_t))
/// with w the normalized cumulative weights (w_{-1} = 1/N), zero rewards and
/// zero model values past the end of the episode. The dataset estimate for
/// index j is the SUM over episodes of g_i(j).
pub(crate) fn j_step_returns(
    ds: &EvalDataset,
    prepared: &Prepared,
    series: &Series,
    js: &[i64],
) -> Result<Vec<Vec<f64>>, CpeError> {
    let weights = normalized_weights(ds, prepared)?;
    let n = ds.num_episodes();
    let w_init = 1.0 / n as f64;
    let horizon = ds.max_horizon();

    let mut per_episode = vec![vec![0.0; js.len()]; n];
    for (i, ep) in ds.episodes.iter().enumerate() {
        // prefix[t] = sum_{u < t} gamma^u (w_u r_u - (w_u Q_u - w_{u-1} V_u))
        let mut prefix = Vec::with_capacity(horizon + 1);
        prefix.push(0.0);
        let mut discount = 1.0;
        let mut acc = 0.0;
        for t in 0..horizon {
            if t < ep.len() {
                let step = &ep[t];
                let w_t = weights[i][t];
                let w_prev = if t == 0 { w_init } else { weights[i][t - 1] };
                acc += discount
                    * (w_t * series.value(step) - (w_t * step.logged_q() - w_prev * step.state_value()));
            }
            discount *= ds.gamma;
            prefix.push(acc);
        }
        for (ji, &j) in js.iter().enumerate() {
            let value = if j < 0 {
                w_init * ep[0].state_value()
            } else {
                let j = j as usize;
                let cut = (j + 1).min(horizon);
                let mut v = prefix[cut];
                // bootstrap with the model value of the state after step j
                if j + 1 < ep.len() {
                    let w_j = weights[i][j.min(horizon - 1)];
                    v += ds.gamma.powi(j as i32 + 1) * w_j * ep[j + 1].state_value();
                }
                v
            };
            per_episode[i][ji] = value;
        }
    }
    Ok(per_episode)
}

/// Sequential doubly-robust estimator, ordinal or weighted.
pub fn sequential_dr(
    ds: &EvalDataset,
    prepared: &Prepared,
    series: &Series,
    weighting: Weighting,
) -> Result<CpeEstimate, CpeError> {
    let denom = sequential_denominator(ds, series);
    match weighting {
        Weighting::Ordinal => {
            let values = ordinal_dr_episode_values(ds, prepared, series);
            let raw = values.iter().sum::<f64>() / values.len() as f64;
            Ok(CpeEstimate::new("sequential_dr", series, raw, denom))
        }
        Weighting::Weighted => {
            let full = ds.max_horizon() as i64 - 1;
            let per_episode = j_step_returns(ds, prepared, series, &[full])?;
            let raw: f64 = per_episode.iter().map(|row| row[0]).sum();
            Ok(CpeEstimate::new("weighted_dr", series, raw, denom))
        }
    }
}
