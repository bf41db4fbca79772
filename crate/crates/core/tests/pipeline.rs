use sego_core::env::{Environment, GoalId, GridNavSpec, StateId};
use sego_core::policy::TabularPolicy;
use sego_core::trainer::{
    evaluate, read_checkpoint, run_training, write_checkpoint, write_metrics_csv, Ablation, DatasetD2,
    TrainerConfig, METRICS_HEADER,
};
use sego_core::SegoError;

fn env() -> Environment {
    Environment::gridnav(&GridNavSpec { width: 3, height: 3, horizon: 4, start: (0, 0) }).unwrap()
}

fn cfg(seed: u64, ablation: Ablation) -> TrainerConfig {
    TrainerConfig { seed, ablation, n_max: 48, batch_size: 16, warmup_pairs: Some(20), ..Default::default() }
}

fn csv_bytes(m: &[sego_core::trainer::IterationMetrics]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, m).unwrap();
    buf
}

#[test]
fn training_is_reproducible() {
    let env = env();
    let (a_models, a) = run_training(&cfg(3, Ablation::Full), &env).unwrap();
    let (b_models, b) = run_training(&cfg(3, Ablation::Full), &env).unwrap();
    assert_eq!(csv_bytes(&a), csv_bytes(&b));
    assert_eq!(a_models, b_models);
    let (_, c) = run_training(&cfg(4, Ablation::Full), &env).unwrap();
    assert_ne!(csv_bytes(&a), csv_bytes(&c));
}

#[test]
fn zero_iterations_gives_header_only() {
    let env = env();
    let (_, m) = run_training(&TrainerConfig { n_max: 0, ..cfg(0, Ablation::Full) }, &env).unwrap();
    assert!(m.is_empty());
    let text = String::from_utf8(csv_bytes(&m)).unwrap();
    assert_eq!(text.trim_end(), METRICS_HEADER.join(","));
}

#[test]
fn no_sft_never_trains() {
    let env = env();
    let (models, metrics) = run_training(&cfg(1, Ablation::NoSft), &env).unwrap();
    assert_eq!(models.policy, TabularPolicy::uniform(&env));
    let uniform = evaluate(&TabularPolicy::uniform(&env), &env, &env.task_set()).unwrap();
    assert!(metrics.iter().all(|m| m.eval_success_rate == uniform));
    assert!(metrics.iter().all(|m| m.subgoal_valid.is_none()));
}

#[test]
fn subgoal_variants_record_validity() {
    let env = env();
    for v in [Ablation::Full, Ablation::NoSequential] {
        let (_, m) = run_training(&cfg(2, v), &env).unwrap();
        assert_eq!(m.len(), 48);
        assert!(m.iter().filter(|x| !x.skipped).all(|x| x.subgoal_valid.is_some()));
        assert!(m.iter().all(|x| (0.0..=1.0).contains(&x.valid_subgoal_fraction)));
    }
    let (_, m) = run_training(&cfg(2, Ablation::NoSubgoal), &env).unwrap();
    assert!(m.iter().all(|x| x.subgoal_valid.is_none() && x.mean_log_alpha.is_nan()));
}

#[test]
fn checkpoint_roundtrips() {
    let env = env();
    let (models, _) = run_training(&cfg(5, Ablation::Full), &env).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &models, "abc", 48).unwrap();
    assert_eq!(read_checkpoint(dir.path()).unwrap(), models);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("config_hash = \"abc\""));
}

#[test]
fn bad_configs_are_configuration_errors() {
    let env = env();
    for bad in [
        TrainerConfig { num_chains: 0, ..Default::default() },
        TrainerConfig { batch_size: 0, ..Default::default() },
        TrainerConfig { smoothing_eps: 0.0, ..Default::default() },
        TrainerConfig { betas: Some(vec![0.5, 0.0]), ..Default::default() },
    ] {
        assert!(matches!(run_training(&bad, &env), Err(SegoError::Configuration(_))), "{bad:?}");
    }
}

#[test]
fn negative_estimates_are_rejected() {
    let mut d2 = DatasetD2::default();
    assert!(d2.push((GoalId(0), StateId(0)), 1.5).is_ok());
    assert!(matches!(d2.push((GoalId(0), StateId(0)), -0.1), Err(SegoError::InputDomain(_))));
    assert_eq!(d2.len(), 1);
}
