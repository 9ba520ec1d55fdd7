use air_hockey::env::{AirHockeyEnv, EnvConfig, NoiseConfig, Strategy};
use air_hockey::policy::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn training_env() -> AirHockeyEnv {
    AirHockeyEnv::with_defaults(EnvConfig::training(NoiseConfig::default())).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        population_pairs: 4,
        episodes_per_member: 4,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn returns_improve_against_an_idle_opponent_on_most_seeds() {
    let env = training_env();
    let config = TrainConfig::default();
    let budget = 50 * config.episodes_per_generation();
    let mut improved = 0;
    for seed in 0..5 {
        let mut idle = FixedOpponent(PolicySnapshot::idle());
        let run = train_toy_learner(
            &env,
            &mut idle,
            Strategy::Aggressive,
            budget,
            &config,
            None,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let curve = &run.generation_returns;
        assert_eq!(curve.len(), 50);
        let (early, late) = (mean(&curve[..10]), mean(&curve[40..]));
        if late > early {
            improved += 1;
        }
    }
    assert!(improved >= 4, "improved on {improved}/5 seeds");
}

#[test]
fn budget_below_one_generation_returns_the_initial_snapshot() {
    let env = training_env();
    let config = small_config();
    for budget in [0, config.episodes_per_generation() - 1] {
        let mut idle = FixedOpponent(PolicySnapshot::idle());
        let run = train_toy_learner(&env, &mut idle, Strategy::Balanced, budget, &config, None, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(run.checkpoints.len(), 1);
        assert_eq!(run.episodes, 0);
        assert!(run.latest().parameters().iter().all(|p| *p == 0.0));
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints_for_any_thread_count() {
    let env = training_env();
    let config = TrainConfig {
        population_pairs: 2,
        episodes_per_member: 2,
        checkpoint_every: 1,
        init_scale: 0.1,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut opp = FixedOpponent(PolicySnapshot::scripted_baseline());
            train_toy_learner(&env, &mut opp, Strategy::Defensive, 40, &config, None, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap()
        })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.episode_returns, b.episode_returns);
    assert_eq!(a.checkpoints.len(), 6);
    assert_eq!(a.checkpoints.last().unwrap().metadata().episode, 40);
}

#[test]
fn stop_criterion_ends_training_early() {
    let env = training_env();
    let config = small_config();
    let stop = |r: &[f64]| r.len() >= 64;
    let mut idle = FixedOpponent(PolicySnapshot::idle());
    let run = train_toy_learner(&env, &mut idle, Strategy::Balanced, 10_000, &config, Some(&stop), &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    assert_eq!(run.episodes, 64);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..50 {
        let kind = PolicyKind::ToyLearner { hidden: 1 + i % 20 };
        let params: Vec<f64> = (0..kind.parameter_count())
            .map(|_| {
                let m: f64 = rng.random_range(-1.0..1.0);
                m * 10f64.powi(rng.random_range(-300..300))
            })
            .collect();
        let snap = PolicySnapshot::new(
            kind,
            params,
            SnapshotMetadata {
                strategy: Some(Strategy::ALL[i % 3]),
                episode: rng.random(),
                ..Default::default()
            },
        )
        .unwrap();
        let path = dir.path().join(format!("{i}.policy"));
        snap.save(&path).unwrap();
        let back = PolicySnapshot::load(&path).unwrap();
        assert_eq!(back, snap);
        assert!(back.parameters().iter().zip(snap.parameters()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn ema_error_decays_geometrically_and_stays_in_range() {
    for alpha in [0.1, 0.3, 0.7, 1.0] {
        let mut f = EmaFilterState::new(alpha, [0.0, 0.0]).unwrap();
        let target = [1.0, -0.5];
        for k in 1..=30 {
            let out = f.apply(target);
            let expected = (1.0 - alpha as f64).powi(k);
            assert!(((target[0] - out[0]) - expected * target[0]).abs() < 1e-12);
            assert!(((target[1] - out[1]) - expected * target[1]).abs() < 1e-12);
        }
    }
    let mut f = EmaFilterState::new(0.3, [0.0, 0.0]).unwrap();
    assert_eq!(f.apply([1.0, 0.0]), [0.3, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut f = EmaFilterState::new(0.4, [1.0, -1.0]).unwrap();
    for _ in 0..1000 {
        let out = f.apply([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]);
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(EmaFilterState::new(0.0, [0.0; 2]).is_err());
    assert!(EmaFilterState::new(1.5, [0.0; 2]).is_err());
}

#[test]
fn acting_leaves_the_snapshot_unchanged_and_is_seed_deterministic() {
    let env = training_env();
    let g = PolicyGeometry::from_env(&env);
    let mut env = env;
    let obs = env.reset(3).unwrap();
    for snap in [
        PolicySnapshot::scripted_baseline(),
        PolicySnapshot::passive_blocker(),
        PolicySnapshot::random_jitterer(),
        PolicySnapshot::idle(),
    ] {
        let before = snap.clone();
        let a = snap.act(obs[0].as_slice(), &g, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = snap.act(obs[0].as_slice(), &g, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(snap, before);
    }
}

fn tiny_plan(plan: &mut air_hockey::harness::TrainingPlan) {
    plan.train = TrainConfig {
        hidden: 2,
        population_pairs: 1,
        episodes_per_member: 1,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    plan.plateau = None;
}

#[test]
fn two_stage_training_writes_histories_and_a_full_pool() {
    use air_hockey::harness::*;
    let mut setup = MatchSetup::default();
    setup.env.rules.match_steps = 2000;
    let root = tempfile::tempdir().unwrap();
    let mut plan = TrainingPlan::stage1(root.path().join("s1"), 16, 5);
    tiny_plan(&mut plan);
    let out = run_training(&setup, &plan).unwrap();
    assert_eq!(out.histories.len(), 3);
    for (strategy, paths) in &out.histories {
        assert_eq!(paths.len(), 9, "{strategy}");
        let dir = paths[0].parent().unwrap();
        let history = load_history(dir).unwrap();
        assert!(history.iter().all(|s| s.metadata().strategy == Some(*strategy)));
        assert_eq!(history.last().unwrap().metadata().episode, 16);
    }
    assert!(root.path().join("s1/config/table.toml").exists());

    let mut plan2 = TrainingPlan::stage2(root.path().join("s2"), root.path().join("s1"), 4, 5);
    tiny_plan(&mut plan2);
    let out2 = run_training(&setup, &plan2).unwrap();
    let pool = air_hockey::selfplay::OpponentPool::load_manifest(out2.pool_manifest.as_ref().unwrap()).unwrap();
    assert_eq!(pool.len(), 25);
    assert_eq!(out2.histories.len(), 1);

    let missing = TrainingPlan::stage2(root.path().join("s3"), root.path().join("nowhere"), 4, 5);
    assert!(run_training(&setup, &missing).is_err());
}

#[test]
fn training_runs_repeat_exactly_for_a_seed() {
    use air_hockey::harness::*;
    let mut setup = MatchSetup::default();
    setup.env.rules.match_steps = 2000;
    let root = tempfile::tempdir().unwrap();
    let read_all = |dir: &std::path::Path| {
        let mut plan = TrainingPlan::stage1(dir.to_path_buf(), 6, 11);
        tiny_plan(&mut plan);
        plan.strategies = vec![Strategy::Balanced];
        let out = run_training(&setup, &plan).unwrap();
        out.histories[0].1.iter().map(|p| std::fs::read_to_string(p).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(read_all(&root.path().join("a")), read_all(&root.path().join("b")));
}
