//! Benchmarks for the hot pipeline stages: timeline join, batched
//! preprocessing, network forward/backward, the mixture NLL, and the
//! counterfactual estimators.

use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use batchrl_core::cpe::{cpe_report, magic, prepare, CpeConfig, Series};
use batchrl_core::envs::{generate_logged_data, gridworld_policy_propensities, ChainMdp, Gridworld, LoggedPolicy};
use batchrl_core::neural::{gmm_nll_grad, mlp_backward, mlp_forward, Activation, GmmHeadOutput, MlpSpec};
use batchrl_core::normalization::{fit_dataset, FitConfig, IdentifyConfig, Preprocessor};
use batchrl_core::timeline::timeline_join;

fn bench_timeline(c: &mut Criterion) {
    let env = Gridworld::default_5x5();
    let policy = gridworld_policy_propensities(&env, &LoggedPolicy::Uniform);
    let rows = generate_logged_data(&env, policy.as_ref(), 500, 1);
    let mut group = c.benchmark_group("timeline");
    group.throughput(Throughput::Elements(rows.len() as u64));
    group.bench_function("join", |b| {
        b.iter_batched(|| rows.clone(), |rows| timeline_join(rows).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

fn bench_preprocessor(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let samples: Vec<f64> = (0..5000).map(|_| rng.random::<f64>() * 10.0 + 0.1).collect();
    let mut specs = Vec::new();
    for (i, kind) in ["continuous", "quantile", "boxcox", "probability"].iter().enumerate() {
        let kind = kind.parse().unwrap();
        specs.push(batchrl_core::normalization::fit_spec(
            &format!("f{i}"),
            &samples,
            kind,
            &FitConfig::default(),
        ));
    }
    let pre = Preprocessor::build(specs).unwrap();
    let rows: Vec<BTreeMap<String, f64>> = (0..1024)
        .map(|_| {
            (0..4)
                .map(|i| (format!("f{i}"), rng.random::<f64>()))
                .collect()
        })
        .collect();
    let refs: Vec<&BTreeMap<String, f64>> = rows.iter().collect();
    let mut group = c.benchmark_group("normalization");
    group.throughput(Throughput::Elements(rows.len() as u64));
    group.bench_function("transform_batch_1024x4", |b| b.iter(|| pre.transform_batch(&refs)));
    group.finish();

    // fitting end to end, dominated by the quantile sort and boxcox grid
    let env = Gridworld::default_5x5();
    let policy = gridworld_policy_propensities(&env, &LoggedPolicy::Uniform);
    let logged = generate_logged_data(&env, policy.as_ref(), 300, 3);
    let transitions = timeline_join(logged).unwrap();
    let feature_rows: Vec<&BTreeMap<String, f64>> =
        transitions.iter().map(|t| &t.state_features).collect();
    c.bench_function("normalization/fit_dataset", |b| {
        b.iter(|| {
            fit_dataset(
                &feature_rows,
                100_000,
                0,
                &BTreeMap::new(),
                &IdentifyConfig {
                    min_samples: 1,
                    ..IdentifyConfig::default()
                },
                &FitConfig::default(),
            )
        })
    });
}

fn bench_neural(c: &mut Criterion) {
    let spec = MlpSpec::new(vec![32, 64, 64, 4], Activation::Relu, 7);
    let params = spec.init_params();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let input = Array2::from_shape_fn((256, 32), |_| rng.random::<f64>() - 0.5);
    let upstream = Array2::from_shape_fn((256, 4), |_| rng.random::<f64>() - 0.5);
    let mut group = c.benchmark_group("neural");
    group.throughput(Throughput::Elements(256));
    group.bench_function("forward_256x32", |b| {
        b.iter(|| mlp_forward(&spec, &params, &input).unwrap())
    });
    let fwd = mlp_forward(&spec, &params, &input).unwrap();
    group.bench_function("backward_256x32", |b| {
        b.iter(|| mlp_backward(&spec, &params, &fwd, &upstream).unwrap())
    });
    group.finish();

    let k = 3;
    let dim = 8;
    let raw: Vec<f64> = (0..GmmHeadOutput::raw_width(k, dim))
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let target: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    c.bench_function("neural/gmm_nll_grad_k3_d8", |b| {
        b.iter(|| gmm_nll_grad(&raw, k, dim, &target))
    });
}

fn bench_cpe(c: &mut Criterion) {
    let chain = ChainMdp::default_fixture();
    let q = chain.policy_q_values(&chain.target);
    let episodes = chain.simulate(2000, 11);
    let ds = chain.eval_dataset(&episodes, &|t, s, a| q[t][s][a]);
    let cfg = CpeConfig::default();
    let mut group = c.benchmark_group("cpe");
    group.throughput(Throughput::Elements(ds.num_episodes() as u64));
    group.bench_function("magic_2000_episodes", |b| {
        b.iter(|| {
            let p = prepare(&ds, &cfg);
            magic(&ds, &p, &Series::Reward, &cfg).unwrap()
        })
    });
    group.bench_function("full_report_2000_episodes", |b| {
        b.iter(|| cpe_report(&ds, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_timeline, bench_preprocessor, bench_neural, bench_cpe);
criterion_main!(benches);
