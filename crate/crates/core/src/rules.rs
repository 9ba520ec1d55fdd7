//! Match rules: possession clocks, faults, stuck-puck resets, goals and the
//! fixed-length match clock.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{detect_goal, PuckState, Side, TableSpec, WorldState};

#[derive(Debug, Error, PartialEq)]
pub enum RulesError {
    #[error("match already ended at step {0}")]
    MatchOver(u32),
    #[error("malformed event log: {0}")]
    MalformedLog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Goal,
    Fault,
    StuckReset,
    EpisodeEnd,
    MatchEnd,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Goal => "goal",
            EventKind::Fault => "fault",
            EventKind::StuckReset => "stuck_reset",
            EventKind::EpisodeEnd => "episode_end",
            EventKind::MatchEnd => "match_end",
        }
    }

    /// Goal, fault and stuck resets end an episode and trigger a faceoff.
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::Goal | EventKind::Fault | EventKind::StuckReset)
    }
}

/// One entry of the match log.
///
/// `side` is the scorer for goals, the offender for faults and the side the
/// puck was placed on for stuck resets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchEvent {
    pub kind: EventKind,
    pub side: Option<Side>,
    pub step_index: u32,
}

impl fmt::Display for MatchEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = self.side.map_or("none", Side::as_str);
        write!(f, "{} {} {}", self.step_index, self.kind.as_str(), side)
    }
}

impl FromStr for MatchEvent {
    type Err = RulesError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = || RulesError::MalformedLog(format!("bad record `{line}`"));
        let mut parts = line.split_whitespace();
        let step_index = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let kind = match parts.next().ok_or_else(bad)? {
            "goal" => EventKind::Goal,
            "fault" => EventKind::Fault,
            "stuck_reset" => EventKind::StuckReset,
            "episode_end" => EventKind::EpisodeEnd,
            "match_end" => EventKind::MatchEnd,
            _ => return Err(bad()),
        };
        let side = match parts.next().ok_or_else(bad)? {
            "A" => Some(Side::A),
            "B" => Some(Side::B),
            "none" => None,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self {
            kind,
            side,
            step_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulesConfig {
    pub control_hz: f64,
    pub fault_limit_s: f64,
    pub stuck_speed: f64,
    pub stuck_duration_s: f64,
    pub match_steps: u32,
    /// Distance of each side's faceoff point from the centre line (m).
    pub faceoff_x: f64,
    /// Half-width of the uniform positional jitter added at faceoffs (m).
    pub faceoff_jitter: f64,
    /// Puck centres with `|x|` below this are out of reach of both mallets.
    pub unreachable_half_width: f64,
}

impl Default for RulesConfig {
    fn default() -> Self {
        Self {
            control_hz: 50.0,
            fault_limit_s: 15.0,
            stuck_speed: 0.01,
            stuck_duration_s: 3.0,
            match_steps: 45_000,
            faceoff_x: 0.6,
            faceoff_jitter: 0.02,
            unreachable_half_width: 0.265,
        }
    }
}

impl RulesConfig {
    pub fn fault_steps(&self) -> u32 {
        (self.fault_limit_s * self.control_hz).round() as u32
    }

    pub fn stuck_steps(&self) -> u32 {
        (self.stuck_duration_s * self.control_hz).round() as u32
    }

    pub fn step_seconds(&self) -> f64 {
        1.0 / self.control_hz
    }
}

/// Places the puck at rest at `side`'s faceoff point with seeded jitter and
/// clears possession and stuck counters.
pub fn faceoff(world: &mut WorldState, side: Side, config: &RulesConfig) {
    let j = config.faceoff_jitter;
    let (jx, jy) = if j > 0.0 {
        (world.rng.random_range(-j..=j), world.rng.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let angle = world
        .rng
        .random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let m = world.mirror_sign();
    world.puck = PuckState::at_rest(side.sign() * config.faceoff_x + m * jx, m * jy);
    world.puck.angle = if world.mirrored {
        (angle + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
    } else {
        angle
    };
    world.possession_steps = [0; 2];
    world.fault_timers = [0.0; 2];
    world.stuck_steps = 0;
}

fn possession_side(world: &WorldState) -> Side {
    let x = world.puck.position.x;
    if x < 0.0 {
        Side::A
    } else if x > 0.0 {
        Side::B
    } else if world.possession_steps[Side::B.index()] > 0 {
        Side::B
    } else {
        Side::A
    }
}

/// Applies the match rules once per control step, after physics.
///
/// Terminal events (goal, fault, stuck reset) reset the puck to a faceoff
/// and are followed by an `episode_end` record. The final step of the match
/// appends `match_end`; any later call fails.
pub fn update_rules(
    world: &mut WorldState,
    table: &TableSpec,
    config: &RulesConfig,
) -> Result<Vec<MatchEvent>, RulesError> {
    if world.step_index >= config.match_steps {
        return Err(RulesError::MatchOver(world.step_index));
    }
    world.step_index += 1;
    let step = world.step_index;
    let mut events = Vec::new();
    let event = |kind, side| MatchEvent {
        kind,
        side,
        step_index: step,
    };

    if let Some(conceded) = detect_goal(&world.puck, table) {
        events.push(event(EventKind::Goal, Some(conceded.opponent())));
        faceoff(world, conceded, config);
    } else {
        let side = possession_side(world);
        let other = side.opponent().index();
        world.possession_steps[other] = 0;
        world.possession_steps[side.index()] += 1;

        let still = world.puck.velocity.norm() < config.stuck_speed;
        let unreachable = world.puck.position.x.abs() < config.unreachable_half_width;
        world.stuck_steps = if still && unreachable {
            world.stuck_steps + 1
        } else {
            0
        };

        if world.possession_steps[side.index()] >= config.fault_steps() {
            events.push(event(EventKind::Fault, Some(side)));
            faceoff(world, side, config);
        } else if world.stuck_steps >= config.stuck_steps() {
            let target = world.random_side();
            events.push(event(EventKind::StuckReset, Some(target)));
            faceoff(world, target, config);
        }
    }

    for s in Side::BOTH {
        world.fault_timers[s.index()] = world.possession_steps[s.index()] as f64 * config.step_seconds();
    }
    if events.iter().any(|e| e.kind.is_terminal()) {
        events.push(event(EventKind::EpisodeEnd, None));
    }
    if step == config.match_steps {
        events.push(event(EventKind::MatchEnd, None));
    }
    Ok(events)
}

/// Per-side tallies of a finished match.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub goals: [u32; 2],
    pub faults: [u32; 2],
    pub points: [i64; 2],
    pub event_log: Vec<MatchEvent>,
}

impl MatchResult {
    pub fn points_for(goals: u32, faults: u32) -> i64 {
        goals as i64 - (faults / 3) as i64
    }

    pub fn differential(&self, side: Side) -> i64 {
        self.points[side.index()] - self.points[side.opponent().index()]
    }
}

/// Tallies a complete match log. Every three faults cost one point.
pub fn score_match(log: &[MatchEvent]) -> Result<MatchResult, RulesError> {
    match log.last() {
        Some(e) if e.kind == EventKind::MatchEnd => {}
        _ => return Err(RulesError::MalformedLog("log does not end with match_end".into())),
    }
    let mut result = MatchResult {
        event_log: log.to_vec(),
        ..Default::default()
    };
    let mut last_step = 0;
    for (i, e) in log.iter().enumerate() {
        if e.step_index < last_step {
            return Err(RulesError::MalformedLog(format!("step index decreases at record {i}")));
        }
        last_step = e.step_index;
        if e.kind == EventKind::MatchEnd && i + 1 != log.len() {
            return Err(RulesError::MalformedLog("match_end before end of log".into()));
        }
        match (e.kind, e.side) {
            (EventKind::Goal, Some(s)) => result.goals[s.index()] += 1,
            (EventKind::Fault, Some(s)) => result.faults[s.index()] += 1,
            (EventKind::Goal | EventKind::Fault, None) => {
                return Err(RulesError::MalformedLog(format!("record {i} has no side")));
            }
            _ => {}
        }
    }
    for s in Side::BOTH {
        let i = s.index();
        result.points[i] = MatchResult::points_for(result.goals[i], result.faults[i]);
    }
    Ok(result)
}
