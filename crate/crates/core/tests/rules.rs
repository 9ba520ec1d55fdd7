use air_hockey::kinematics::JointState;
use air_hockey::physics::*;
use air_hockey::rules::*;
use nalgebra::Vector2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world_with_puck(x: f64, y: f64) -> WorldState {
    let far = MalletState {
        position: Vector2::new(50.0, 50.0),
        velocity: Vector2::zeros(),
    };
    WorldState::new(
        PuckState::at_rest(x, y),
        [far, far],
        [JointState::at_rest(vec![]), JointState::at_rest(vec![])],
        ChaCha8Rng::seed_from_u64(1),
    )
}

#[test]
fn held_puck_faults_on_step_750_of_possession() {
    let table = TableSpec::default();
    let config = RulesConfig::default();
    assert_eq!(config.fault_steps(), 750);
    for (x, side) in [(-0.6, Side::A), (0.6, Side::B)] {
        let mut w = world_with_puck(x, 0.0);
        for step in 1..=751u32 {
            let events = update_rules(&mut w, &table, &config).unwrap();
            assert!(w.fault_timers[side.index()] <= config.fault_limit_s + config.step_seconds());
            if step == 750 {
                assert_eq!(events.len(), 2);
                assert_eq!(events[0].kind, EventKind::Fault);
                assert_eq!(events[0].side, Some(side));
                assert_eq!(events[1].kind, EventKind::EpisodeEnd);
                assert_eq!(w.fault_timers, [0.0, 0.0]);
                assert_eq!(w.puck.velocity, Vector2::zeros());
                assert_eq!(w.puck.position.x.signum(), side.sign());
            } else {
                assert!(events.is_empty(), "step {step}: {events:?}");
            }
        }
    }
}

#[test]
fn crossing_the_centre_line_restarts_the_clock() {
    let table = TableSpec::default();
    let config = RulesConfig::default();
    let mut w = world_with_puck(-0.6, 0.0);
    for _ in 0..500 {
        update_rules(&mut w, &table, &config).unwrap();
    }
    assert!((w.fault_timers[0] - 10.0).abs() < 1e-9);
    w.puck = PuckState::at_rest(0.6, 0.0);
    update_rules(&mut w, &table, &config).unwrap();
    assert_eq!(w.fault_timers[0], 0.0);
    assert_eq!(w.possession_steps, [0, 1]);
}

#[test]
fn match_ends_at_step_45000_and_rejects_further_updates() {
    let table = TableSpec::default();
    let config = RulesConfig::default();
    let mut w = world_with_puck(-0.6, 0.0);
    let mut log = Vec::new();
    for _ in 0..45_000 {
        log.extend(update_rules(&mut w, &table, &config).unwrap());
    }
    let last = log.last().unwrap();
    assert_eq!(last.kind, EventKind::MatchEnd);
    assert_eq!(last.step_index, 45_000);
    assert!(matches!(update_rules(&mut w, &table, &config), Err(RulesError::MatchOver(45_000))));
    let result = score_match(&log).unwrap();
    // The puck never leaves the faulting side's faceoff point.
    assert_eq!(result.faults[0], 60);
    assert_eq!(result.points, [-20, 0]);
    assert!(log.windows(2).all(|p| p[0].step_index <= p[1].step_index));
}

#[test]
fn goal_scores_for_the_other_side_and_faces_off_for_the_conceder() {
    let table = TableSpec::default();
    let config = RulesConfig::default();
    let mut w = world_with_puck(-table.half_length() - 0.01, 0.0);
    let events = update_rules(&mut w, &table, &config).unwrap();
    assert_eq!(events[0].kind, EventKind::Goal);
    assert_eq!(events[0].side, Some(Side::B));
    assert_eq!(events[1].kind, EventKind::EpisodeEnd);
    let dx = w.puck.position.x + config.faceoff_x;
    assert!(dx.abs() <= config.faceoff_jitter);
    assert!(w.puck.position.y.abs() <= config.faceoff_jitter);
    assert_eq!(w.puck.velocity, Vector2::zeros());
}

#[test]
fn scoring_examples() {
    let ev = |kind, side, step_index| MatchEvent {
        kind,
        side,
        step_index,
    };
    let mut log = vec![
        ev(EventKind::Goal, Some(Side::A), 10),
        ev(EventKind::Goal, Some(Side::A), 20),
    ];
    log.push(ev(EventKind::MatchEnd, None, 45_000));
    assert_eq!(score_match(&log).unwrap().points[0], 2);

    let mut log = vec![ev(EventKind::Goal, Some(Side::A), 1)];
    log.extend((0..3).map(|i| ev(EventKind::Fault, Some(Side::A), 10 + i)));
    log.push(ev(EventKind::MatchEnd, None, 45_000));
    assert_eq!(score_match(&log).unwrap().points[0], 0);

    let mut log: Vec<_> = (0..5).map(|i| ev(EventKind::Fault, Some(Side::A), 10 + i)).collect();
    log.push(ev(EventKind::MatchEnd, None, 45_000));
    assert_eq!(score_match(&log).unwrap().points[0], -1);

    assert!(score_match(&log[..5]).is_err());
}

fn event_strategy() -> impl Strategy<Value = (u8, u8, u32)> {
    (0u8..4, 0u8..3, 1u32..100)
}

proptest! {
    #[test]
    fn points_identity_holds_for_random_logs(records in prop::collection::vec(event_strategy(), 0..200)) {
        let mut step = 0;
        let mut log = Vec::new();
        for (kind, side, gap) in records {
            step += gap;
            let kind = [EventKind::Goal, EventKind::Fault, EventKind::StuckReset, EventKind::EpisodeEnd][kind as usize];
            let side = [Some(Side::A), Some(Side::B), None][side as usize];
            if matches!(kind, EventKind::Goal | EventKind::Fault) && side.is_none() {
                continue;
            }
            log.push(MatchEvent { kind, side, step_index: step });
        }
        log.push(MatchEvent { kind: EventKind::MatchEnd, side: None, step_index: step + 1 });
        let result = score_match(&log).unwrap();
        for s in Side::BOTH {
            let goals = log.iter().filter(|e| e.kind == EventKind::Goal && e.side == Some(s)).count() as i64;
            let faults = log.iter().filter(|e| e.kind == EventKind::Fault && e.side == Some(s)).count() as i64;
            prop_assert_eq!(result.points[s.index()], goals - faults.div_euclid(3));
        }
        let text: Vec<String> = log.iter().map(|e| e.to_string()).collect();
        let parsed: Vec<MatchEvent> = text.iter().map(|t| t.parse().unwrap()).collect();
        prop_assert_eq!(parsed, log);
    }
}
