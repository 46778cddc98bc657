//! temporary cartpole probe (deleted before finalizing)
use std::collections::BTreeMap;
use batchrl_core::envs::{generate_logged_data, CartPole, CartPoleState};
use batchrl_core::normalization::{fit_dataset, FitConfig, IdentifyConfig};
use batchrl_core::timeline::timeline_join;
use batchrl_core::trainer::{train, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
#[ignore]
fn probe() {
    let env = CartPole::default();
    let uniform = |_: &CartPoleState| vec![0.5, 0.5];
    let all_rows = generate_logged_data(&env, &uniform, 2600, 3);
    println!("generated {} rows", all_rows.len());
    // keep whole episodes up to ~50k transitions
    let mut rows = Vec::new();
    let mut current = String::new();
    for r in all_rows {
        if rows.len() >= 50_000 && r.mdp_id != current {
            break;
        }
        current = r.mdp_id.clone();
        rows.push(r);
    }
    println!("kept {} rows", rows.len());
    let transitions = timeline_join(rows).unwrap();
    let fr: Vec<&BTreeMap<String, f64>> = transitions.iter().map(|t| &t.state_features).collect();
    let specs = fit_dataset(&fr, 100_000, 0, &BTreeMap::new(), &IdentifyConfig::default(), &FitConfig::default()).specs;
    for (label, epochs, batch, lr, hidden) in [
        ("e30 b256 lr1e-3 h64x64", 30u32, 256, 1e-3, vec![64, 64]),
        ("e60 b256 lr1e-3 h64x64", 60, 256, 1e-3, vec![64, 64]),
        ("e30 b512 lr1e-3 h128x128", 30, 512, 1e-3, vec![128, 128]),
    ] {
        let config: TrainConfig = serde_json::from_value(serde_json::json!({
            "algorithm": "dqn", "gamma": 0.99, "epochs": epochs, "batch_size": batch,
            "learning_rate": lr, "hidden": hidden, "double_q": true,
            "target_update": {"hard": {"every": 100}},
            "cpe": {"enabled": true, "target_policy": "epsilon:0.1"},
        })).unwrap();
        let t0 = std::time::Instant::now();
        let outcome = train(&config, &transitions, specs.clone(), 3, None, None).unwrap();
        let pre = batchrl_core::Preprocessor::build(outcome.checkpoint.normalization_specs()).unwrap();
        let net = outcome.checkpoint.online_network().unwrap();
        // greedy return over 100 episodes
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut total = 0.0;
        for _ in 0..100 {
            let mut s = env.reset(&mut rng);
            loop {
                let row = pre.transform_row(&env.state_features(&s));
                let input = Array2::from_shape_vec((1, row.len()), row).unwrap();
                let q = net.q_values(&input).unwrap();
                let a = if q[[0, 0]] >= q[[0, 1]] { 0 } else { 1 };
                let (next, r, done) = env.step(&s, a);
                total += r;
                if done { break; }
                s = next;
            }
        }
        let last = outcome.history.last().unwrap();
        let grab = |name: &str| last.cpe.iter()
            .find(|e| e.estimator == name && e.metric == "reward")
            .and_then(|e| e.normalized).unwrap_or(f64::NAN);
        println!("{label}: return {:.1}, wdr {:.3}, magic {:.3}, elapsed {:.0}s",
            total / 100.0, grab("weighted_dr"), grab("magic"), t0.elapsed().as_secs_f64());
    }
}
