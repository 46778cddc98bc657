//! DDPG and SAC on the point-mass task, scored against the best linear
//! controller found by grid search.

use std::collections::BTreeMap;

use batchrl_core::envs::{generate_pointmass_data, PointMass, PointMassState};
use batchrl_core::normalization::{fit_dataset, FitConfig, IdentifyConfig};
use batchrl_core::timeline::timeline_join;
use batchrl_core::trainer::{train, ContinuousModel, TrainConfig};
use ndarray::Array2;

fn eval_starts() -> Vec<PointMassState> {
    (0..8)
        .map(|i| PointMassState {
            pos: -1.0 + 2.0 * i as f64 / 7.0,
            vel: 0.0,
            steps: 0,
        })
        .collect()
}

fn policy_return(
    env: &PointMass,
    starts: &[PointMassState],
    mut act: impl FnMut(&PointMassState) -> f64,
) -> f64 {
    let mut total = 0.0;
    for &start in starts {
        let mut s = start;
        loop {
            let a = act(&s);
            let (next, r, done) = env.step(&s, a);
            total += r;
            if done {
                break;
            }
            s = next;
        }
    }
    total / starts.len() as f64
}

fn run_continuous(algorithm: &str, epochs: u32, seed: u64) -> f64 {
    let env = PointMass::default();
    let rows = generate_pointmass_data(&env, 400, seed); // 20k transitions
    let transitions = timeline_join(rows).unwrap();
    let feature_rows: Vec<&BTreeMap<String, f64>> =
        transitions.iter().map(|t| &t.state_features).collect();
    let specs = fit_dataset(
        &feature_rows,
        100_000,
        0,
        &BTreeMap::new(),
        &IdentifyConfig::default(),
        &FitConfig::default(),
    )
    .specs;
    let config: TrainConfig = serde_json::from_value(serde_json::json!({
        "algorithm": algorithm,
        "gamma": 0.99,
        "activation": "tanh",
        "epochs": epochs,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "hidden": [64, 64],
        "target_update": {"polyak": {"tau": 0.005}},
    }))
    .unwrap();
    let outcome = train(&config, &transitions, specs, seed, None, None).unwrap();

    let pre = batchrl_core::Preprocessor::build(outcome.checkpoint.normalization_specs()).unwrap();
    let model = outcome.checkpoint.restore_continuous().unwrap();
    let starts = eval_starts();
    policy_return(&env, &starts, |s: &PointMassState| {
        let row = pre.transform_row(&env.state_features(s));
        let input = Array2::from_shape_vec((1, row.len()), row).unwrap();
        let a = match &model {
            ContinuousModel::Ddpg(m) => m.act(&input).unwrap(),
            ContinuousModel::Sac(m) => m.act_mean(&input).unwrap(),
        };
        a[[0, 0]]
    })
}

#[test]
fn ddpg_reaches_ninety_percent_of_linear_oracle() {
    let env = PointMass::default();
    let starts = eval_starts();
    let (k1, k2, oracle) = env.best_linear_controller(&starts);
    let ddpg = run_continuous("ddpg", 160, 4); // ~20k update steps
    // returns are negative costs: within 90% means at most oracle/0.9 cost
    assert!(
        ddpg >= oracle / 0.9,
        "ddpg {ddpg:.3} vs oracle {oracle:.3} (gains {k1}, {k2})"
    );
}

#[test]
fn sac_learns_a_usable_controller() {
    let env = PointMass::default();
    let starts = eval_starts();
    let (_, _, oracle) = env.best_linear_controller(&starts);
    let passive = policy_return(&env, &starts, |_| 0.0);
    let sac = run_continuous("sac", 160, 6);
    // clearly better than doing nothing and within 80% of the linear oracle
    assert!(
        sac >= oracle / 0.8 && sac > passive * 0.5,
        "sac {sac:.3} vs oracle {oracle:.3}, passive {passive:.3}"
    );
}
