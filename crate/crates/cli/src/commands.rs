//! Subcommand definitions and dispatch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use batchrl_core::cpe::CpeConfig;
use batchrl_core::envs::{
    generate_logged_data, generate_pointmass_data, gridworld_policy_propensities, CartPole,
    Gridworld, LoggedPolicy, PointMass,
};
use batchrl_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use batchrl_core::normalization::{
    fit_dataset, specs_from_json, specs_to_json, FeatureKind, FitConfig, IdentifyConfig,
};
use batchrl_core::rl::{PidController, PolicyMode};
use batchrl_core::serving::{batch_score, Scorer, ScoringRequest, ServingPolicy};
use batchrl_core::timeline::{
    compute_reward, timeline_join, JoinedTransition, RawRow, RewardWeights,
};
use batchrl_core::trainer::{evaluate_model, train, ModelCheckpoint, TrainConfig, TrainError};
use batchrl_core::understanding::{understand, CheckThresholds, EnvModelConfig};

pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn data(message: impl Into<String>) -> CmdError {
        CmdError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<batchrl_core::io::IoError> for CmdError {
    fn from(e: batchrl_core::io::IoError) -> Self {
        CmdError::data(e.to_string())
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFiniteLoss { .. } => 3,
            _ => 2,
        };
        CmdError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "batchrl",
    version,
    about = "Offline reinforcement learning pipeline: join logs, normalize features, check the problem formulation, train policies, evaluate them counterfactually, and score states."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Join logged rows into training transitions
    Timeline(TimelineArgs),
    /// Identify feature kinds and fit normalization parameters
    Normalize(NormalizeArgs),
    /// Fit an environment model and check the MDP formulation
    Understand(UnderstandArgs),
    /// Train a policy from transitions
    Train(TrainArgs),
    /// Counterfactually evaluate a checkpoint against logged transitions
    Evaluate(EvaluateArgs),
    /// Score requests with a checkpoint, logging full propensity maps
    Score(ScoreArgs),
    /// Generate logged data from a bundled environment
    RunEnv(RunEnvArgs),
    /// Full pipeline on a bundled environment, printing the final CPE table
    E2e(E2eArgs),
}

#[derive(Args)]
pub struct TimelineArgs {
    /// Input JSONL of logged rows
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL of joined transitions
    #[arg(long)]
    output: PathBuf,
    /// Optional JSON map of metric weights; adds the shaped value to each
    /// row's metrics under "reward"
    #[arg(long)]
    reward_weights: Option<PathBuf>,
}

#[derive(Args)]
pub struct NormalizeArgs {
    /// Input JSONL of joined transitions
    #[arg(long)]
    input: PathBuf,
    /// Output JSON map feature_id -> {kind, params}
    #[arg(long)]
    output: PathBuf,
    /// Fit on at most this many uniformly sampled rows
    #[arg(long, default_value_t = 100_000)]
    sample: usize,
    /// Minimum non-missing samples required to identify a feature
    #[arg(long, default_value_t = 100)]
    min_samples: usize,
    /// Force a feature's kind, e.g. --override f3=quantile (repeatable)
    #[arg(long = "override", value_name = "FEATURE=KIND")]
    overrides: Vec<String>,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct UnderstandArgs {
    /// Input JSONL of joined transitions
    #[arg(long)]
    input: PathBuf,
    /// Fitted normalization spec JSON
    #[arg(long)]
    norm: PathBuf,
    /// Output report JSON
    #[arg(long)]
    report: PathBuf,
    /// Number of mixture components
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Model-fitting epochs
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Reward weights JSON (defaults to weight 1 on the "reward" metric)
    #[arg(long)]
    reward_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config JSON
    #[arg(long)]
    config: PathBuf,
    /// Input JSONL of joined transitions
    #[arg(long)]
    input: PathBuf,
    /// Fitted normalization spec JSON
    #[arg(long)]
    norm: PathBuf,
    /// Output directory for checkpoint.json, metrics.csv and metrics.json
    #[arg(long)]
    out: PathBuf,
    /// Warm-start checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Model checkpoint JSON
    #[arg(long)]
    model: PathBuf,
    /// Input JSONL of joined transitions
    #[arg(long)]
    input: PathBuf,
    /// Target policy: greedy, epsilon:<e> or softmax:<t>
    #[arg(long, default_value = "greedy")]
    target_policy: String,
    /// Output report JSON ({epoch, metric, estimator, raw, normalized} rows)
    #[arg(long)]
    report: PathBuf,
    /// Cap on importance ratios; 0 disables capping
    #[arg(long, default_value_t = 10_000.0)]
    rho_cap: f64,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Model checkpoint JSON
    #[arg(long)]
    model: PathBuf,
    /// Input JSONL of scoring requests
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL of responses
    #[arg(long)]
    out: PathBuf,
    /// Also write re-ingestable row stubs here
    #[arg(long)]
    rows: Option<PathBuf>,
    /// greedy, epsilon:<e>, softmax:<t> or threshold
    #[arg(long, default_value = "greedy")]
    policy: String,
    /// Target send rate for the PID-tuned threshold policy
    #[arg(long)]
    pid_target: Option<f64>,
    /// Requests per PID feedback window
    #[arg(long, default_value_t = 100)]
    pid_window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct RunEnvArgs {
    /// gridworld, cartpole or pointmass
    #[arg(long)]
    env: String,
    /// uniform, eps:<v> or softmax:<t> (the optimal-policy variants need a
    /// tabular environment)
    #[arg(long, default_value = "uniform")]
    policy: String,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL of logged rows
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct E2eArgs {
    /// gridworld or cartpole
    #[arg(long, default_value = "gridworld")]
    env: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Working directory for intermediate files (temp dir when absent)
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Override the episode count
    #[arg(long)]
    episodes: Option<usize>,
    /// Override the training epoch count
    #[arg(long)]
    epochs: Option<u32>,
}

pub fn dispatch(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Timeline(args) => cmd_timeline(args),
        Command::Normalize(args) => cmd_normalize(args),
        Command::Understand(args) => cmd_understand(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Score(args) => cmd_score(args),
        Command::RunEnv(args) => cmd_run_env(args),
        Command::E2e(args) => cmd_e2e(args),
    }
}

fn load_weights(path: &Option<PathBuf>) -> Result<RewardWeights, CmdError> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(RewardWeights::reward_only()),
    }
}

fn cmd_timeline(args: TimelineArgs) -> Result<(), CmdError> {
    let rows: Vec<RawRow> = read_jsonl(&args.input)?;
    let weights: Option<RewardWeights> = args
        .reward_weights
        .as_ref()
        .map(|p| read_json(p))
        .transpose()?;
    if let Some(w) = &weights {
        let known: BTreeSet<String> =
            rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        w.validate(&known).map_err(|e| CmdError::data(e.to_string()))?;
    }
    let mut transitions =
        timeline_join(rows).map_err(|e| CmdError::data(e.to_string()))?;
    if let Some(w) = &weights {
        for t in &mut transitions {
            let shaped = compute_reward(&t.metrics, w);
            t.metrics.insert("reward".to_string(), shaped);
        }
    }
    write_jsonl(&args.output, &transitions)?;
    println!("wrote {} transitions to {}", transitions.len(), args.output.display());
    Ok(())
}

fn parse_overrides(raw: &[String]) -> Result<BTreeMap<String, FeatureKind>, CmdError> {
    let mut out = BTreeMap::new();
    for item in raw {
        let (feature, kind) = item
            .split_once('=')
            .ok_or_else(|| CmdError::data(format!("bad override {item:?}; expected FEATURE=KIND")))?;
        let kind: FeatureKind = kind
            .parse()
            .map_err(|e: String| CmdError::data(e))?;
        out.insert(feature.to_string(), kind);
    }
    Ok(out)
}

fn cmd_normalize(args: NormalizeArgs) -> Result<(), CmdError> {
    let transitions: Vec<JoinedTransition> = read_jsonl(&args.input)?;
    let overrides = parse_overrides(&args.overrides)?;
    let rows: Vec<&BTreeMap<String, f64>> =
        transitions.iter().map(|t| &t.state_features).collect();
    let identify = IdentifyConfig {
        min_samples: args.min_samples,
        ..IdentifyConfig::default()
    };
    let report = fit_dataset(
        &rows,
        args.sample,
        args.seed,
        &overrides,
        &identify,
        &FitConfig::default(),
    );
    write_json(&args.output, &specs_to_json(&report.specs))?;
    println!(
        "fitted {} features ({} skipped) -> {}",
        report.specs.len(),
        report.skipped.len(),
        args.output.display()
    );
    Ok(())
}

fn cmd_understand(args: UnderstandArgs) -> Result<(), CmdError> {
    let transitions: Vec<JoinedTransition> = read_jsonl(&args.input)?;
    let specs = specs_from_json(&read_json(&args.norm)?).map_err(CmdError::data)?;
    let preprocessor = batchrl_core::Preprocessor::build(specs)
        .map_err(|e| CmdError::data(e.to_string()))?;
    let weights = load_weights(&args.reward_weights)?;
    let cfg = EnvModelConfig {
        mixture_components: args.k,
        epochs: args.epochs,
        seed: args.seed,
        ..EnvModelConfig::default()
    };
    let report = understand(
        &transitions,
        &preprocessor,
        &|t| compute_reward(&t.metrics, &weights),
        &cfg,
        CheckThresholds::default(),
    )
    .map_err(|e| CmdError::data(e.to_string()))?;
    write_json(&args.report, &report)?;
    println!(
        "transitions predictable: {} | reward-state-action link: {}",
        report.transitions_predictable, report.reward_state_action_link
    );
    for line in &report.explanations {
        println!("  - {line}");
    }
    println!("report -> {}", args.report.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CmdError> {
    let config: TrainConfig = read_json(&args.config)?;
    let transitions: Vec<JoinedTransition> = read_jsonl(&args.input)?;
    let specs = specs_from_json(&read_json(&args.norm)?).map_err(CmdError::data)?;
    let resume = args.resume.as_ref().map(|p| ModelCheckpoint::load(p)).transpose()?;
    let outcome = train(&config, &transitions, specs, args.seed, resume, Some(&args.out))?;
    println!(
        "trained {} epochs; checkpoint -> {}",
        outcome.checkpoint.epochs_completed,
        args.out.join("checkpoint.json").display()
    );
    if let Some(last) = outcome.history.last() {
        println!(
            "final epoch: td_loss {:.6}, mc_loss {:.6}",
            last.td_loss, last.mc_loss
        );
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CmdError> {
    let ckpt = ModelCheckpoint::load(&args.model)?;
    let transitions: Vec<JoinedTransition> = read_jsonl(&args.input)?;
    let target: PolicyMode = args.target_policy.parse().map_err(CmdError::data)?;
    let cpe_cfg = CpeConfig {
        rho_cap: if args.rho_cap > 0.0 { Some(args.rho_cap) } else { None },
        ..CpeConfig::default()
    };
    let estimates = evaluate_model(&ckpt, &transitions, target, &cpe_cfg)?;
    let report: Vec<serde_json::Value> = estimates
        .iter()
        .map(|e| {
            serde_json::json!({
                "epoch": ckpt.epochs_completed,
                "metric": e.metric,
                "estimator": e.estimator,
                "raw": e.raw,
                "normalized": e.normalized,
            })
        })
        .collect();
    write_json(&args.report, &report)?;
    print_cpe_table(&estimates);
    Ok(())
}

fn print_cpe_table(estimates: &[batchrl_core::CpeEstimate]) {
    println!("{:<16} {:<16} {:>12} {:>12}", "estimator", "metric", "raw", "normalized");
    for e in estimates {
        let norm = e
            .normalized
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".to_string());
        println!("{:<16} {:<16} {:>12.4} {:>12}", e.estimator, e.metric, e.raw, norm);
    }
}

fn cmd_score(args: ScoreArgs) -> Result<(), CmdError> {
    let ckpt = ModelCheckpoint::load(&args.model)?;
    let requests: Vec<ScoringRequest> = read_jsonl(&args.input)?;
    let policy = if args.policy == "threshold" {
        let target = args.pid_target.unwrap_or(0.5);
        ServingPolicy::Threshold(PidController::new(0.5, 0.05, 0.0, target, 0.5))
    } else {
        ServingPolicy::Mode(args.policy.parse().map_err(CmdError::data)?)
    };
    let mut scorer =
        Scorer::new(&ckpt, policy, args.seed).map_err(|e| CmdError::data(e.to_string()))?;
    let (responses, stubs, errors) = batch_score(&mut scorer, &requests, args.pid_window);
    write_jsonl(&args.out, &responses)?;
    if let Some(rows_path) = &args.rows {
        write_jsonl(rows_path, &stubs)?;
    }
    for (line, message) in &errors {
        eprintln!("request line {line}: {message}");
    }
    println!(
        "scored {} request(s), {} error(s) -> {}",
        responses.len(),
        errors.len(),
        args.out.display()
    );
    Ok(())
}

fn gridworld_logged_policy(policy: &str) -> Result<LoggedPolicy, CmdError> {
    if policy == "uniform" {
        return Ok(LoggedPolicy::Uniform);
    }
    if let Some(v) = policy.strip_prefix("eps:") {
        let epsilon: f64 = v
            .parse()
            .map_err(|_| CmdError::data(format!("bad epsilon in {policy:?}")))?;
        return Ok(LoggedPolicy::EpsilonGreedy { epsilon });
    }
    if let Some(v) = policy.strip_prefix("softmax:") {
        let temperature: f64 = v
            .parse()
            .map_err(|_| CmdError::data(format!("bad temperature in {policy:?}")))?;
        return Ok(LoggedPolicy::Softmax { temperature });
    }
    Err(CmdError::data(format!(
        "unknown logging policy {policy:?}; expected uniform, eps:<v> or softmax:<t>"
    )))
}

fn cmd_run_env(args: RunEnvArgs) -> Result<(), CmdError> {
    let rows = generate_env_rows(&args.env, &args.policy, args.episodes, args.seed)?;
    write_jsonl(&args.out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn generate_env_rows(
    env: &str,
    policy: &str,
    episodes: usize,
    seed: u64,
) -> Result<Vec<RawRow>, CmdError> {
    match env {
        "gridworld" => {
            let world = Gridworld::default_5x5();
            let logged = gridworld_logged_policy(policy)?;
            let propensities = gridworld_policy_propensities(&world, &logged);
            Ok(generate_logged_data(&world, propensities.as_ref(), episodes, seed))
        }
        "cartpole" => {
            if policy != "uniform" {
                return Err(CmdError::data(
                    "cartpole logging supports only the uniform policy",
                ));
            }
            let world = CartPole::default();
            Ok(generate_logged_data(
                &world,
                &|_: &batchrl_core::envs::CartPoleState| vec![0.5, 0.5],
                episodes,
                seed,
            ))
        }
        "pointmass" => {
            if policy != "uniform" {
                return Err(CmdError::data(
                    "pointmass logging supports only the uniform policy",
                ));
            }
            Ok(generate_pointmass_data(&PointMass::default(), episodes, seed))
        }
        other => Err(CmdError::data(format!(
            "unknown environment {other:?}; expected gridworld, cartpole or pointmass"
        ))),
    }
}

fn cmd_e2e(args: E2eArgs) -> Result<(), CmdError> {
    let temp;
    let workdir: &Path = match &args.workdir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CmdError::data(format!("cannot create {}: {e}", dir.display())))?;
            dir
        }
        None => {
            temp = tempdir()?;
            &temp
        }
    };

    let (mut config, policy, episodes): (TrainConfig, String, usize) = match args.env.as_str() {
        "gridworld" => (
            serde_json::from_str(include_str!("../../../configs/gridworld_dqn.json"))
                .expect("bundled config"),
            "eps:0.3".to_string(),
            1200,
        ),
        "cartpole" => (
            serde_json::from_str(include_str!("../../../configs/cartpole_dqn.json"))
                .expect("bundled config"),
            "uniform".to_string(),
            2400,
        ),
        other => {
            return Err(CmdError::data(format!(
                "e2e supports gridworld and cartpole, got {other:?}"
            )))
        }
    };
    if let Some(episodes_override) = args.episodes {
        return run_e2e(workdir, &args.env, &policy, episodes_override, args.seed, {
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            config
        });
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    run_e2e(workdir, &args.env, &policy, episodes, args.seed, config)
}

fn tempdir() -> Result<PathBuf, CmdError> {
    let dir = std::env::temp_dir().join(format!("batchrl-e2e-{}", std::process::id()));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CmdError::data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn run_e2e(
    workdir: &Path,
    env: &str,
    policy: &str,
    episodes: usize,
    seed: u64,
    config: TrainConfig,
) -> Result<(), CmdError> {
    println!("[1/6] generating {episodes} episodes of {env} logs");
    let rows = generate_env_rows(env, policy, episodes, seed)?;
    write_jsonl(&workdir.join("rows.jsonl"), &rows)?;

    println!("[2/6] timeline join");
    let transitions = timeline_join(rows).map_err(|e| CmdError::data(e.to_string()))?;
    write_jsonl(&workdir.join("transitions.jsonl"), &transitions)?;
    println!("      {} transitions", transitions.len());

    println!("[3/6] fitting normalization");
    let feature_rows: Vec<&BTreeMap<String, f64>> =
        transitions.iter().map(|t| &t.state_features).collect();
    let fit = fit_dataset(
        &feature_rows,
        100_000,
        seed,
        &BTreeMap::new(),
        &IdentifyConfig {
            min_samples: 10,
            ..IdentifyConfig::default()
        },
        &FitConfig::default(),
    );
    write_json(&workdir.join("norm.json"), &specs_to_json(&fit.specs))?;

    println!("[4/6] data understanding checks");
    let preprocessor = batchrl_core::Preprocessor::build(fit.specs.clone())
        .map_err(|e| CmdError::data(e.to_string()))?;
    let weights = RewardWeights::reward_only();
    let understanding = understand(
        &transitions,
        &preprocessor,
        &|t| compute_reward(&t.metrics, &weights),
        &EnvModelConfig {
            epochs: 15,
            seed,
            ..EnvModelConfig::default()
        },
        CheckThresholds::default(),
    )
    .map_err(|e| CmdError::data(e.to_string()))?;
    write_json(&workdir.join("report.json"), &understanding)?;
    println!(
        "      transitions predictable: {} | reward link: {}",
        understanding.transitions_predictable, understanding.reward_state_action_link
    );

    println!("[5/6] training ({:?}, {} epochs)", config.algorithm, config.epochs);
    let outcome = train(&config, &transitions, fit.specs, seed, None, Some(workdir))?;

    println!("[6/6] final-epoch counterfactual estimates");
    let last = outcome
        .history
        .last()
        .ok_or_else(|| CmdError::data("no epochs ran"))?;
    let reward_series: Vec<batchrl_core::CpeEstimate> = last
        .cpe
        .iter()
        .filter(|e| e.metric == "reward")
        .cloned()
        .collect();
    print_cpe_table(&reward_series);
    println!("artifacts in {}", workdir.display());
    Ok(())
}
