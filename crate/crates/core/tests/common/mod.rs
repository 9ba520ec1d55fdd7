#![allow(dead_code)]

use air_hockey::config::FORMAT_VERSION;
use air_hockey::ensemble::{EstimatorConfig, ScoreEstimator};
use air_hockey::env::{AirHockeyEnv, EnvConfig};
use air_hockey::kinematics::{ChainSpec, ClipMode, JointSpec, JointState, KinematicChain, Origin};
use air_hockey::physics::{MalletState, PuckState, Side, WorldState};
use air_hockey::policy::{PolicyGeometry, PolicySnapshot};
use air_hockey::rules::score_match;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scripted_pool() -> [PolicySnapshot; 4] {
    [
        PolicySnapshot::scripted_baseline(),
        PolicySnapshot::passive_blocker(),
        PolicySnapshot::random_jitterer(),
        PolicySnapshot::idle(),
    ]
}

/// Plays one noise-free match between two scripted policies picked by
/// `seed` while both sides run a score estimator. Returns whether both
/// estimates equal the simulator's tallies.
pub fn estimator_exact_on_match(seed: u64) -> bool {
    let pool = scripted_pool();
    let a = &pool[(seed % 4) as usize];
    let b = &pool[((seed / 4) % 4) as usize];
    let mut env = AirHockeyEnv::with_defaults(EnvConfig::evaluation()).unwrap();
    let geometry = PolicyGeometry::from_env(&env);
    let mut obs = env.reset(seed).unwrap();
    let mut est = [0, 1].map(|_| ScoreEstimator::new(EstimatorConfig::from_env(&env)));
    for side in Side::BOTH {
        est[side.index()].update(&obs[side.index()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    loop {
        let x = a.act(obs[0].as_slice(), &geometry, &mut rng).unwrap();
        let y = b.act(obs[1].as_slice(), &geometry, &mut rng).unwrap();
        let step = env.step([x, y]).unwrap();
        obs = step.observations;
        log.extend(step.events);
        for side in Side::BOTH {
            est[side.index()].update(&obs[side.index()]);
        }
        if step.match_over {
            break;
        }
    }
    let truth = score_match(&log).unwrap();
    Side::BOTH.iter().all(|&side| {
        let (me, them) = (side.index(), side.opponent().index());
        let e = est[me].estimate();
        (e.own_goals, e.opp_goals, e.own_faults, e.opp_faults)
            == (truth.goals[me], truth.goals[them], truth.faults[me], truth.faults[them])
            && e.own_points() == truth.points[me]
            && e.opp_points() == truth.points[them]
    })
}

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Scripted policies, two stand-in checkpoints and the ensemble.
pub fn seven_specs() -> Vec<air_hockey::harness::PolicySpec> {
    let dir = configs_dir().join("ensemble");
    let mut specs: Vec<air_hockey::harness::PolicySpec> =
        ["scripted:baseline", "scripted:passive_blocker", "scripted:random_jitterer", "scripted:idle"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
    specs.push(air_hockey::harness::PolicySpec::File(dir.join("balanced.policy")));
    specs.push(air_hockey::harness::PolicySpec::File(dir.join("aggressive.policy")));
    specs.push(air_hockey::harness::PolicySpec::Ensemble(dir.join("ensemble.toml")));
    specs
}

/// Plays a match between two of [`seven_specs`] picked by `seed`, then checks
/// that a second run is byte-identical and that the log verifies.
pub fn replay_verifies(setup: &air_hockey::harness::MatchSetup, seed: u64) -> bool {
    use air_hockey::harness::{run_match, verify_replay, MatchOptions};
    let specs = seven_specs();
    let a = &specs[(seed % 7) as usize];
    let b = &specs[((seed / 7) % 7) as usize];
    let options = MatchOptions {
        mirrored: seed % 2 == 1,
        ..MatchOptions::default()
    };
    let first = run_match(setup, a, b, seed, &options).unwrap().replay.to_text();
    let second = run_match(setup, a, b, seed, &options).unwrap().replay.to_text();
    first == second && verify_replay(&first, setup).is_ok()
}

/// Mean point differential of `learner` against `opponent` over `matches`
/// seeds, each played unmirrored and mirrored.
pub fn mean_differential(learner: &PolicySnapshot, opponent: &PolicySnapshot, matches: u64, base_seed: u64) -> f64 {
    use air_hockey::harness::{play_match, MatchOptions, MatchSetup};
    use air_hockey::policy::{Agent, SnapshotAgent};
    let setup = MatchSetup::default();
    let mut total = 0i64;
    for m in 0..matches {
        for mirrored in [false, true] {
            let env = setup.build_env().unwrap();
            let g = PolicyGeometry::from_env(&env);
            let agents: [Box<dyn Agent>; 2] = [
                Box::new(SnapshotAgent::new(learner.clone(), g.clone())),
                Box::new(SnapshotAgent::new(opponent.clone(), g)),
            ];
            let options = MatchOptions {
                mirrored,
                ..MatchOptions::default()
            };
            let ids = [learner.label(), opponent.label()];
            let record = play_match(&setup, env, agents, ids, base_seed + m, &options).unwrap();
            total += record.result.differential(Side::A);
        }
    }
    total as f64 / (2 * matches) as f64
}

/// Trains one balanced learner against a pool seeded with the scripted
/// baseline and one against the baseline alone, with the same seed and
/// budget, and returns both learners' mean differentials against the
/// random jitterer.
pub fn directional_trial(seed: u64, budget: u64, eval_matches: u64) -> (f64, f64) {
    use air_hockey::env::{NoiseConfig, Strategy};
    use air_hockey::policy::{train_toy_learner, FixedOpponent, TrainConfig};
    use air_hockey::selfplay::OpponentPool;
    let env = AirHockeyEnv::with_defaults(EnvConfig::training(NoiseConfig::default())).unwrap();
    let config = TrainConfig::default();
    let mut pool = OpponentPool::new(vec![PolicySnapshot::scripted_baseline()]).unwrap();
    let with_pool = train_toy_learner(
        &env,
        &mut pool,
        Strategy::Balanced,
        budget,
        &config,
        None,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let mut fixed = FixedOpponent(PolicySnapshot::scripted_baseline());
    let alone = train_toy_learner(
        &env,
        &mut fixed,
        Strategy::Balanced,
        budget,
        &config,
        None,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let held_out = PolicySnapshot::random_jitterer();
    (
        mean_differential(with_pool.latest(), &held_out, eval_matches, seed * 1000),
        mean_differential(alone.latest(), &held_out, eval_matches, seed * 1000),
    )
}

// Random inputs shared by the module tests and the acceptance run.

pub fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: Vector3<f64> = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            let u = v / n;
            return [u.x, u.y, u.z];
        }
    }
}

pub fn random_origin(rng: &mut impl Rng) -> Origin {
    Origin {
        xyz: [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ],
        rpy: [
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.1..3.1),
        ],
    }
}

pub fn random_chain(rng: &mut impl Rng, clipping: ClipMode) -> KinematicChain {
    let n = rng.random_range(1..=8);
    let joints = (0..n)
        .map(|_| JointSpec {
            axis: random_unit(rng),
            origin: random_origin(rng),
            pos_limits: [-3.0, 3.0],
            vel_limit: rng.random_range(0.2..3.0),
        })
        .collect();
    KinematicChain::new(ChainSpec {
        format_version: FORMAT_VERSION,
        joint_count: n,
        base: random_origin(rng),
        joints,
        mallet_offset: [
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.0..0.3),
        ],
        clipping,
    })
    .unwrap()
}

pub fn random_q(chain: &KinematicChain, rng: &mut impl Rng) -> Vec<f64> {
    (0..chain.joint_count())
        .map(|i| {
            let [lo, hi] = chain.pos_limits(i);
            rng.random_range(lo..hi)
        })
        .collect()
}

pub fn random_world(rng: &mut impl Rng, chain: &KinematicChain) -> WorldState {
    let mut q = || -> Vec<f64> {
        (0..7)
            .map(|i| {
                let [lo, hi] = chain.pos_limits(i);
                rng.random_range(lo - 0.5..hi + 0.5)
            })
            .collect()
    };
    let ja = JointState::at_rest(q());
    let jb = JointState::at_rest(q());
    let mut p = || Vector2::new(rng.random_range(-1.5..1.5), rng.random_range(-0.8..0.8));
    let puck = PuckState {
        position: p(),
        velocity: p() * 4.0,
        angle: 0.0,
        angular_velocity: 0.0,
    };
    let mallets = [
        MalletState {
            position: p(),
            velocity: Vector2::zeros(),
        },
        MalletState {
            position: p(),
            velocity: Vector2::zeros(),
        },
    ];
    let mut w = WorldState::new(puck, mallets, [ja, jb], ChaCha8Rng::seed_from_u64(rng.random()));
    w.puck.angle = rng.random_range(-10.0..10.0);
    let possession = rng.random_range(0..900);
    let side = rng.random_range(0..2);
    w.possession_steps[side] = possession;
    w.fault_timers[side] = possession as f64 / 50.0;
    w
}

/// Position on a segment [-lim, lim] with specular walls, from the unfolded
/// straight-line coordinate.
pub fn fold(unfolded: f64, lim: f64) -> f64 {
    let m = (unfolded + lim).rem_euclid(4.0 * lim);
    if m <= 2.0 * lim {
        m - lim
    } else {
        3.0 * lim - m
    }
}

