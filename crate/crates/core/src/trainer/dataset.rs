//! Dataset assembly: preprocessed matrices, n-step reward windows, episode
//! splits, and minibatch gathering for the three training families.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::neural::mlp_forward;
use crate::normalization::{NormalizationSpec, Preprocessor};
use crate::rl::{ContinuousBatch, DqnBatch, ParametricBatch, QNetwork, RlError};
use crate::stats::fnv1a64;
use crate::timeline::{compute_reward, group_episodes, ActionValue, JoinedTransition};

use super::{TrainConfig, TrainError};

fn in_eval_split(mdp_id: &str, eval_fraction: f64) -> bool {
    if eval_fraction >= 1.0 {
        return true;
    }
    if eval_fraction <= 0.0 {
        return false;
    }
    ((fnv1a64(mdp_id.as_bytes()) % 1000) as f64) < eval_fraction * 1000.0
}

/// Preprocessed discrete-action (or parametric-action) dataset.
pub struct DiscreteDataset {
    pub actions: Vec<String>,
    pub state_width: usize,
    pub action_width: usize,
    pub states: Array2<f64>,
    /// Global index of the logged action (discrete path).
    pub action_idx: Vec<usize>,
    /// Encoded logged action features (parametric path).
    pub action_features: Array2<f64>,
    pub rewards: Vec<f64>,
    pub mdp_id: Vec<String>,
    pub ordinal: Vec<u64>,
    pub logged_propensity: Vec<f64>,
    pub terminal: Vec<bool>,
    pub metrics: Vec<BTreeMap<String, f64>>,
    /// Possible actions at the current step, as global indices (discrete).
    pub possible: Vec<Vec<usize>>,
    /// Encoded candidate vectors at the current step (parametric).
    pub possible_features: Vec<Vec<Vec<f64>>>,
    /// Position of the logged action inside `possible` / `possible_features`.
    possible_pos: Vec<usize>,
    /// Monte-Carlo discounted return from each step to episode end.
    pub mc_return: Vec<f64>,

    // n-step training targets
    pub nstep_reward: Vec<f64>,
    pub bootstrap_state: Array2<f64>,
    pub has_bootstrap: Vec<bool>,
    pub nstep_discount: Vec<f64>,
    pub bootstrap_possible_mask: Vec<Vec<bool>>,
    pub bootstrap_possible_features: Vec<Vec<Vec<f64>>>,
    pub bootstrap_next_action: Vec<Option<usize>>,

    pub train_rows: Vec<usize>,
    pub train_episodes: Vec<Vec<usize>>,
    pub eval_episodes: Vec<Vec<usize>>,
    pub action_norm_specs: Vec<NormalizationSpec>,
    pub preprocessor: Preprocessor,
    pub action_preprocessor: Option<Preprocessor>,
}

fn discrete_name(action: &ActionValue) -> Option<&str> {
    action.as_discrete()
}

impl DiscreteDataset {
    pub fn build(
        transitions: &[JoinedTransition],
        norm_specs: Vec<NormalizationSpec>,
        config: &TrainConfig,
        parametric: bool,
    ) -> Result<DiscreteDataset, TrainError> {
        if transitions.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        // validate reward weights against the observed metric names
        let known: BTreeSet<String> = transitions
            .iter()
            .flat_map(|t| t.metrics.keys().cloned())
            .collect();
        config.reward_weights.validate(&known)?;

        let episodes = group_episodes(transitions.to_vec())?;

        // action vocabulary / action feature ids
        let mut actions: Vec<String> = match &config.actions {
            Some(list) => list.clone(),
            None => {
                let mut set = BTreeSet::new();
                for t in transitions {
                    if let Some(name) = discrete_name(&t.action) {
                        set.insert(name.to_string());
                    }
                    for a in t.possible_actions.iter().flatten() {
                        if let Some(name) = discrete_name(a) {
                            set.insert(name.to_string());
                        }
                    }
                }
                set.into_iter().collect()
            }
        };
        actions.sort();
        actions.dedup();

        let mut action_norm_specs: Vec<NormalizationSpec> = Vec::new();
        let action_preprocessor = if parametric {
            // fit specs over logged action features unless provided within
            // the state specs is not possible (ids must be disjoint), so
            // parametric action specs are fitted here from all logged and
            // candidate actions
            let mut rows: Vec<&BTreeMap<String, f64>> = Vec::new();
            for t in transitions {
                if let Some(f) = t.action.as_parametric() {
                    rows.push(f);
                }
                for a in t.possible_actions.iter().flatten() {
                    if let Some(f) = a.as_parametric() {
                        rows.push(f);
                    }
                }
            }
            if rows.is_empty() {
                return Err(TrainError::ActionKindMismatch("parametric", "parametric_dqn"));
            }
            let report = crate::normalization::fit_dataset(
                &rows,
                100_000,
                7,
                &BTreeMap::new(),
                &crate::normalization::IdentifyConfig {
                    min_samples: 1,
                    ..Default::default()
                },
                &crate::normalization::FitConfig::default(),
            );
            action_norm_specs = report.specs.clone();
            Some(Preprocessor::build(report.specs)?)
        } else {
            let any_discrete = transitions.iter().any(|t| t.action.as_discrete().is_some());
            if !any_discrete {
                return Err(TrainError::ActionKindMismatch("discrete", "dqn"));
            }
            None
        };

        let preprocessor = Preprocessor::build(norm_specs)?;
        let state_width = preprocessor.output_width();
        let action_width = action_preprocessor
            .as_ref()
            .map(|p| p.output_width())
            .unwrap_or(0);
        let action_index_of = |a: &ActionValue| -> Option<usize> {
            discrete_name(a).and_then(|name| actions.binary_search_by(|x| x.as_str().cmp(name)).ok())
        };
        let encode_pre = action_preprocessor.clone();
        let encode_action = move |a: &ActionValue| -> Vec<f64> {
            match (&encode_pre, a) {
                (Some(pre), ActionValue::Parametric(f)) => pre.transform_row(f),
                _ => Vec::new(),
            }
        };

        let n = transitions.len();
        let mut ds = DiscreteDataset {
            actions: actions.clone(),
            state_width,
            action_width,
            states: Array2::zeros((n, state_width)),
            action_idx: vec![0; n],
            action_features: Array2::zeros((n, action_width)),
            rewards: vec![0.0; n],
            mdp_id: vec![String::new(); n],
            ordinal: vec![0; n],
            logged_propensity: vec![1.0; n],
            terminal: vec![false; n],
            metrics: vec![BTreeMap::new(); n],
            possible: vec![Vec::new(); n],
            possible_features: vec![Vec::new(); n],
            possible_pos: vec![0; n],
            mc_return: vec![0.0; n],
            nstep_reward: vec![0.0; n],
            bootstrap_state: Array2::zeros((n, state_width)),
            has_bootstrap: vec![false; n],
            nstep_discount: vec![1.0; n],
            bootstrap_possible_mask: vec![Vec::new(); n],
            bootstrap_possible_features: vec![Vec::new(); n],
            bootstrap_next_action: vec![None; n],
            train_rows: Vec::new(),
            train_episodes: Vec::new(),
            eval_episodes: Vec::new(),
            action_norm_specs,
            preprocessor,
            action_preprocessor,
        };

        let gamma = config.gamma;
        let exponent = |t: &JoinedTransition| -> f64 {
            if config.use_time_diff_discount {
                t.time_diff.max(1) as f64
            } else {
                1.0
            }
        };

        let mut row = 0usize;
        for ep in &episodes {
            let base = row;
            let len = ep.transitions.len();
            let is_eval = in_eval_split(&ep.mdp_id, config.eval_fraction);
            let indices: Vec<usize> = (base..base + len).collect();
            if is_eval {
                ds.eval_episodes.push(indices.clone());
            } else {
                ds.train_episodes.push(indices.clone());
                ds.train_rows.extend(indices.iter().copied());
            }

            for t in &ep.transitions {
                let state = ds.preprocessor.transform_row(&t.state_features);
                for (c, v) in state.into_iter().enumerate() {
                    ds.states[[row, c]] = v;
                }
                ds.rewards[row] = compute_reward(&t.metrics, &config.reward_weights);
                ds.mdp_id[row] = t.mdp_id.clone();
                ds.ordinal[row] = t.sequence_number_ordinal;
                ds.logged_propensity[row] = t.action_probability;
                ds.terminal[row] = t.terminal;
                ds.metrics[row] = t.metrics.clone();

                if parametric {
                    let candidates: Vec<&ActionValue> = t
                        .possible_actions
                        .as_ref()
                        .map(|v| v.iter().collect())
                        .unwrap_or_default();
                    if candidates.is_empty() {
                        return Err(TrainError::Rl(RlError::MissingPossibleNextActions(
                            t.mdp_id.clone(),
                        )));
                    }
                    let enc = encode_action(&t.action);
                    for (c, v) in enc.iter().enumerate() {
                        ds.action_features[[row, c]] = *v;
                    }
                    ds.possible_features[row] =
                        candidates.iter().map(|a| encode_action(a)).collect();
                    ds.possible_pos[row] = candidates
                        .iter()
                        .position(|a| **a == t.action)
                        .unwrap_or(0);
                } else {
                    let idx = action_index_of(&t.action).ok_or(TrainError::ActionKindMismatch(
                        "discrete", "dqn",
                    ))?;
                    ds.action_idx[row] = idx;
                    let possible: Vec<usize> = match &t.possible_actions {
                        Some(list) => {
                            let mut p: Vec<usize> =
                                list.iter().filter_map(|a| action_index_of(a)).collect();
                            p.sort_unstable();
                            p.dedup();
                            p
                        }
                        None => (0..actions.len()).collect(),
                    };
                    ds.possible_pos[row] =
                        possible.iter().position(|&a| a == idx).unwrap_or(0);
                    ds.possible[row] = possible;
                }
                row += 1;
            }

            // Monte-Carlo returns, backward.
            let mut ret = 0.0;
            for (j, t) in ep.transitions.iter().enumerate().rev() {
                ret = ds.rewards[base + j] + gamma.powf(exponent(t)) * ret;
                ds.mc_return[base + j] = ret;
            }
            // the final step's discount never applies forward; recompute
            // cleanly: return at j = r_j + gamma^e_j * return at j+1,
            // with return past the end = 0 (the loop above already does this)

            // n-step windows.
            let n_step = config.multi_step.max(1);
            for j in 0..len {
                let mut acc = 0.0;
                let mut disc = 1.0;
                let mut k = j;
                loop {
                    acc += disc * ds.rewards[base + k];
                    let is_last_of_window = k + 1 == j + n_step || k + 1 == len;
                    disc *= gamma.powf(exponent(&ep.transitions[k]));
                    if is_last_of_window {
                        let bootstrap = &ep.transitions[k];
                        ds.nstep_reward[base + j] = acc;
                        if !bootstrap.terminal {
                            let next = bootstrap
                                .next_state_features
                                .as_ref()
                                .expect("non-terminal has next state");
                            let enc = ds.preprocessor.transform_row(next);
                            for (c, v) in enc.into_iter().enumerate() {
                                ds.bootstrap_state[[base + j, c]] = v;
                            }
                            ds.has_bootstrap[base + j] = true;
                            ds.nstep_discount[base + j] = disc;
                            if parametric {
                                let cands = bootstrap
                                    .possible_next_actions
                                    .as_ref()
                                    .ok_or_else(|| {
                                        TrainError::Rl(RlError::MissingPossibleNextActions(
                                            bootstrap.mdp_id.clone(),
                                        ))
                                    })?;
                                ds.bootstrap_possible_features[base + j] =
                                    cands.iter().map(|a| encode_action(a)).collect();
                            } else if config.sarsa {
                                ds.bootstrap_next_action[base + j] = bootstrap
                                    .next_action
                                    .as_ref()
                                    .and_then(|a| action_index_of(a));
                            } else {
                                let mask = match &bootstrap.possible_next_actions {
                                    Some(list) => {
                                        let mut mask = vec![false; actions.len()];
                                        for a in list {
                                            if let Some(i) = action_index_of(a) {
                                                mask[i] = true;
                                            }
                                        }
                                        mask
                                    }
                                    None => {
                                        return Err(TrainError::Rl(
                                            RlError::MissingPossibleNextActions(
                                                bootstrap.mdp_id.clone(),
                                            ),
                                        ))
                                    }
                                };
                                ds.bootstrap_possible_mask[base + j] = mask;
                            }
                        }
                        break;
                    }
                    k += 1;
                }
            }
        }

        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Position of the logged action within the step's possible-action list.
    pub fn possible_position(&self, row: usize) -> usize {
        self.possible_pos[row]
    }

    fn gather(&self, source: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), source.ncols()));
        for (r, &idx) in rows.iter().enumerate() {
            out.row_mut(r).assign(&source.row(idx));
        }
        out
    }

    /// Assemble a discrete-DQN minibatch from dataset row indices.
    pub fn dqn_batch(&self, rows: &[usize]) -> DqnBatch {
        DqnBatch {
            states: self.gather(&self.states, rows),
            action_index: rows.iter().map(|&i| self.action_idx[i]).collect(),
            rewards: rows.iter().map(|&i| self.nstep_reward[i]).collect(),
            bootstrap_states: self.gather(&self.bootstrap_state, rows),
            has_bootstrap: rows.iter().map(|&i| self.has_bootstrap[i]).collect(),
            discount: rows.iter().map(|&i| self.nstep_discount[i]).collect(),
            possible_next: rows
                .iter()
                .map(|&i| {
                    if self.bootstrap_possible_mask[i].is_empty() {
                        vec![true; self.actions.len()]
                    } else {
                        self.bootstrap_possible_mask[i].clone()
                    }
                })
                .collect(),
            next_action_index: rows.iter().map(|&i| self.bootstrap_next_action[i]).collect(),
        }
    }

    /// Assemble a parametric-DQN minibatch from dataset row indices.
    pub fn parametric_batch(&self, rows: &[usize]) -> ParametricBatch {
        let width = self.state_width + self.action_width;
        let mut state_action = Array2::zeros((rows.len(), width));
        for (r, &idx) in rows.iter().enumerate() {
            for c in 0..self.state_width {
                state_action[[r, c]] = self.states[[idx, c]];
            }
            for c in 0..self.action_width {
                state_action[[r, self.state_width + c]] = self.action_features[[idx, c]];
            }
        }
        let mut ranges = Vec::with_capacity(rows.len());
        let mut total = 0usize;
        for &idx in rows {
            let count = if self.has_bootstrap[idx] {
                self.bootstrap_possible_features[idx].len()
            } else {
                0
            };
            ranges.push((total, total + count));
            total += count;
        }
        let mut next_candidates = Array2::zeros((total, width));
        let mut r = 0usize;
        for &idx in rows {
            if !self.has_bootstrap[idx] {
                continue;
            }
            for cand in &self.bootstrap_possible_features[idx] {
                for c in 0..self.state_width {
                    next_candidates[[r, c]] = self.bootstrap_state[[idx, c]];
                }
                for (c, v) in cand.iter().enumerate() {
                    next_candidates[[r, self.state_width + c]] = *v;
                }
                r += 1;
            }
        }
        ParametricBatch {
            state_action,
            rewards: rows.iter().map(|&i| self.nstep_reward[i]).collect(),
            discount: rows.iter().map(|&i| self.nstep_discount[i]).collect(),
            next_candidates,
            candidate_ranges: ranges,
        }
    }

    /// Q-values over each row's possible actions (discrete path), one
    /// forward pass for all rows.
    pub fn q_for_rows(&self, online: &QNetwork, rows: &[usize]) -> Result<Vec<Vec<f64>>, RlError> {
        let states = self.gather(&self.states, rows);
        let q_all = online.q_values(&states)?;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(r, &idx)| {
                self.possible[idx]
                    .iter()
                    .map(|&a| q_all[[r, a]])
                    .collect::<Vec<f64>>()
            })
            .collect())
    }

    /// Q-values over each row's candidate actions (parametric path).
    pub fn parametric_q_for_rows(
        &self,
        online: &QNetwork,
        rows: &[usize],
    ) -> Result<Vec<Vec<f64>>, RlError> {
        let width = self.state_width + self.action_width;
        let total: usize = rows.iter().map(|&i| self.possible_features[i].len()).sum();
        let mut input = Array2::zeros((total, width));
        let mut r = 0usize;
        for &idx in rows {
            for cand in &self.possible_features[idx] {
                for c in 0..self.state_width {
                    input[[r, c]] = self.states[[idx, c]];
                }
                for (c, v) in cand.iter().enumerate() {
                    input[[r, self.state_width + c]] = *v;
                }
                r += 1;
            }
        }
        let fwd = mlp_forward(&online.spec, &online.params, &input)?;
        let scores = fwd.output().column(0).to_owned();
        let mut out = Vec::with_capacity(rows.len());
        let mut cursor = 0usize;
        for &idx in rows {
            let count = self.possible_features[idx].len();
            out.push((cursor..cursor + count).map(|i| scores[i]).collect());
            cursor += count;
        }
        Ok(out)
    }
}

/// Continuous-action dataset for DDPG/SAC.
pub struct ContinuousDataset {
    pub action_feature_ids: Vec<String>,
    pub state_width: usize,
    pub action_width: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub discount: Vec<f64>,
    pub mc_return: Vec<f64>,
    pub train_rows: Vec<usize>,
    pub eval_rows: Vec<usize>,
    pub preprocessor: Preprocessor,
}

impl ContinuousDataset {
    pub fn build(
        transitions: &[JoinedTransition],
        norm_specs: Vec<NormalizationSpec>,
        config: &TrainConfig,
    ) -> Result<ContinuousDataset, TrainError> {
        if transitions.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let known: BTreeSet<String> = transitions
            .iter()
            .flat_map(|t| t.metrics.keys().cloned())
            .collect();
        config.reward_weights.validate(&known)?;
        let episodes = group_episodes(transitions.to_vec())?;

        let mut ids: BTreeSet<String> = BTreeSet::new();
        for t in transitions {
            match t.action.as_parametric() {
                Some(f) => ids.extend(f.keys().cloned()),
                None => {
                    return Err(TrainError::ActionKindMismatch("continuous", "ddpg/sac"));
                }
            }
        }
        let action_feature_ids: Vec<String> = ids.into_iter().collect();
        let preprocessor = Preprocessor::build(norm_specs)?;
        let state_width = preprocessor.output_width();
        let action_width = action_feature_ids.len();

        let n = transitions.len();
        let mut ds = ContinuousDataset {
            action_feature_ids: action_feature_ids.clone(),
            state_width,
            action_width,
            states: Array2::zeros((n, state_width)),
            actions: Array2::zeros((n, action_width)),
            rewards: vec![0.0; n],
            next_states: Array2::zeros((n, state_width)),
            discount: vec![0.0; n],
            mc_return: vec![0.0; n],
            train_rows: Vec::new(),
            eval_rows: Vec::new(),
            preprocessor,
        };

        let gamma = config.gamma;
        let mut row = 0usize;
        for ep in &episodes {
            let base = row;
            let is_eval = in_eval_split(&ep.mdp_id, config.eval_fraction);
            for t in &ep.transitions {
                let state = ds.preprocessor.transform_row(&t.state_features);
                for (c, v) in state.into_iter().enumerate() {
                    ds.states[[row, c]] = v;
                }
                let features = t.action.as_parametric().expect("validated above");
                for (c, id) in action_feature_ids.iter().enumerate() {
                    ds.actions[[row, c]] = features.get(id).copied().unwrap_or(0.0);
                }
                ds.rewards[row] = compute_reward(&t.metrics, &config.reward_weights);
                if let Some(next) = &t.next_state_features {
                    let enc = ds.preprocessor.transform_row(next);
                    for (c, v) in enc.into_iter().enumerate() {
                        ds.next_states[[row, c]] = v;
                    }
                    let e = if config.use_time_diff_discount {
                        t.time_diff.max(1) as f64
                    } else {
                        1.0
                    };
                    ds.discount[row] = gamma.powf(e);
                }
                if is_eval {
                    ds.eval_rows.push(row);
                } else {
                    ds.train_rows.push(row);
                }
                row += 1;
            }
            let mut ret = 0.0;
            for j in (0..ep.transitions.len()).rev() {
                ret = ds.rewards[base + j] + gamma * ret;
                ds.mc_return[base + j] = ret;
            }
        }
        Ok(ds)
    }

    pub fn batch(&self, rows: &[usize]) -> ContinuousBatch {
        let gather = |src: &Array2<f64>| {
            let mut out = Array2::zeros((rows.len(), src.ncols()));
            for (r, &idx) in rows.iter().enumerate() {
                out.row_mut(r).assign(&src.row(idx));
            }
            out
        };
        ContinuousBatch {
            states: gather(&self.states),
            actions: gather(&self.actions),
            rewards: rows.iter().map(|&i| self.rewards[i]).collect(),
            next_states: gather(&self.next_states),
            discount: rows.iter().map(|&i| self.discount[i]).collect(),
        }
    }

    /// MSE between the critic's Q at logged actions and logged returns,
    /// over the eval split (all rows when the split is empty).
    pub fn mc_loss(&self, model: &super::checkpoint::ContinuousModel) -> Result<f64, TrainError> {
        let rows = if self.eval_rows.is_empty() {
            &self.train_rows
        } else {
            &self.eval_rows
        };
        if rows.is_empty() {
            return Ok(0.0);
        }
        let batch = self.batch(rows);
        let input = {
            let mut out = Array2::zeros((
                batch.states.nrows(),
                batch.states.ncols() + batch.actions.ncols(),
            ));
            out.slice_mut(ndarray::s![.., ..batch.states.ncols()])
                .assign(&batch.states);
            out.slice_mut(ndarray::s![.., batch.states.ncols()..])
                .assign(&batch.actions);
            out
        };
        let q = match model {
            super::checkpoint::ContinuousModel::Ddpg(m) => {
                mlp_forward(&m.critic_spec, &m.critic, &input).map_err(RlError::from)?
            }
            super::checkpoint::ContinuousModel::Sac(m) => {
                mlp_forward(&m.critic_spec, &m.critic1, &input).map_err(RlError::from)?
            }
        };
        let mut total = 0.0;
        for (i, &row) in rows.iter().enumerate() {
            let err = q.output()[[i, 0]] - self.mc_return[row];
            total += err * err;
        }
        Ok(total / rows.len() as f64)
    }
}
