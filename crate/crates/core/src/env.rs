//! Agent-facing environment: stacked normalized observations, absolute
//! Cartesian target actions resolved through the arm kinematics, sparse
//! strategy rewards and the learner-only stochasticity.
//!
//! Every agent sees the table in its own frame: its goal is at negative x.
//! Side A's frame equals the table frame; side B's frame is the table frame
//! rotated by half a turn about the vertical axis.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, FORMAT_VERSION};
use crate::kinematics::{CartesianDisplacement, JointCommand, JointState, KinematicChain, KinematicsError};
use crate::physics::{self, MalletState, PuckState, Side, TableSpec, WorldState};
use crate::rules::{self, EventKind, MatchEvent, RulesConfig, RulesError};

pub const OBS_DIM: usize = 40;
pub const ARM_DOF: usize = 7;
pub const MALLET_STACK: usize = 2;
pub const PUCK_POSITION_STACK: usize = 10;
pub const PUCK_ORIENTATION_STACK: usize = 2;

/// Offsets of each component in the flattened observation. Stacked
/// components are stored newest first.
pub mod layout {
    use std::ops::Range;
    pub const JOINTS: Range<usize> = 0..7;
    pub const OWN_MALLET: Range<usize> = 7..11;
    pub const OPP_MALLET: Range<usize> = 11..15;
    pub const PUCK_POSITION: Range<usize> = 15..35;
    pub const PUCK_ORIENTATION: Range<usize> = 35..39;
    pub const FAULT_TIMER: usize = 39;
}

/// Normalized target mallet position `(x, y)` in the agent's workspace.
pub type Action = [f64; 2];

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("environment needs a {ARM_DOF}-joint chain, got {0}")]
    ChainDof(usize),
    #[error("home position unreachable (residual {0:.3e} m)")]
    HomeUnreachable(f64),
    #[error("step called before reset")]
    NotReset,
}

/// Flattened 40-dimensional observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn joints(&self) -> &[f64] {
        &self.0[layout::JOINTS]
    }

    fn pair(&self, start: usize, age: usize) -> [f64; 2] {
        [self.0[start + 2 * age], self.0[start + 2 * age + 1]]
    }

    /// Own mallet position, `age` 0 is the newest entry.
    pub fn own_mallet(&self, age: usize) -> [f64; 2] {
        self.pair(layout::OWN_MALLET.start, age)
    }

    pub fn opp_mallet(&self, age: usize) -> [f64; 2] {
        self.pair(layout::OPP_MALLET.start, age)
    }

    pub fn puck(&self, age: usize) -> [f64; 2] {
        self.pair(layout::PUCK_POSITION.start, age)
    }

    pub fn puck_orientation(&self, age: usize) -> [f64; 2] {
        self.pair(layout::PUCK_ORIENTATION.start, age)
    }

    /// Signed fraction of the fault limit; negative while the puck is on the
    /// observing agent's side.
    pub fn fault_timer(&self) -> f64 {
        self.0[layout::FAULT_TIMER]
    }
}

/// One un-stacked normalized reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub joints: [f64; ARM_DOF],
    pub own_mallet: [f64; 2],
    pub opp_mallet: [f64; 2],
    pub puck: [f64; 2],
    pub orientation: [f64; 2],
    pub fault_timer: f64,
}

impl Frame {
    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.joints.iter_mut().for_each(&mut f);
        self.own_mallet.iter_mut().for_each(&mut f);
        self.opp_mallet.iter_mut().for_each(&mut f);
        self.puck.iter_mut().for_each(&mut f);
        self.orientation.iter_mut().for_each(&mut f);
        f(&mut self.fault_timer);
    }
}

/// Per-agent observation history with the asymmetric stack depths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationStack {
    pub joint_positions: [f64; ARM_DOF],
    pub own_mallet: [[f64; 2]; MALLET_STACK],
    pub opp_mallet: [[f64; 2]; MALLET_STACK],
    pub puck_position: [[f64; 2]; PUCK_POSITION_STACK],
    pub puck_orientation: [[f64; 2]; PUCK_ORIENTATION_STACK],
    pub fault_timer: f64,
    /// Remaining steps of simulated tracking loss.
    pub tracking_lost_for: u32,
    initialized: bool,
}

fn shift_in<const N: usize>(slots: &mut [[f64; 2]; N], newest: [f64; 2]) {
    slots.copy_within(0..N - 1, 1);
    slots[0] = newest;
}

impl ObservationStack {
    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the stack empty; the next observation fills every slot.
    pub fn clear(&mut self) {
        *self = Self::default();
    }

    /// Fills every slot with `frame`.
    pub fn reset(&mut self, frame: &Frame) {
        self.joint_positions = frame.joints;
        self.own_mallet = [frame.own_mallet; MALLET_STACK];
        self.opp_mallet = [frame.opp_mallet; MALLET_STACK];
        self.puck_position = [frame.puck; PUCK_POSITION_STACK];
        self.puck_orientation = [frame.orientation; PUCK_ORIENTATION_STACK];
        self.fault_timer = frame.fault_timer;
        self.initialized = true;
    }

    /// Shifts every stacked component by one and inserts `frame` first.
    pub fn push(&mut self, frame: &Frame) {
        if !self.initialized {
            self.reset(frame);
            return;
        }
        self.joint_positions = frame.joints;
        shift_in(&mut self.own_mallet, frame.own_mallet);
        shift_in(&mut self.opp_mallet, frame.opp_mallet);
        shift_in(&mut self.puck_position, frame.puck);
        shift_in(&mut self.puck_orientation, frame.orientation);
        self.fault_timer = frame.fault_timer;
    }

    pub fn flatten(&self) -> Observation {
        let mut out = [0.0; OBS_DIM];
        out[layout::JOINTS].copy_from_slice(&self.joint_positions);
        out[layout::OWN_MALLET].copy_from_slice(self.own_mallet.as_flattened());
        out[layout::OPP_MALLET].copy_from_slice(self.opp_mallet.as_flattened());
        out[layout::PUCK_POSITION].copy_from_slice(self.puck_position.as_flattened());
        out[layout::PUCK_ORIENTATION].copy_from_slice(self.puck_orientation.as_flattened());
        out[layout::FAULT_TIMER] = self.fault_timer;
        Observation(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Balanced,
    Aggressive,
    Defensive,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Balanced, Strategy::Aggressive, Strategy::Defensive];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Balanced => "balanced",
            Strategy::Aggressive => "aggressive",
            Strategy::Defensive => "defensive",
        }
    }

    pub fn rewards(self) -> StrategyRewardConfig {
        let score_goal = match self {
            Strategy::Balanced => Rational64::new(2, 3),
            Strategy::Aggressive => Rational64::from_integer(1),
            Strategy::Defensive => Rational64::from_integer(0),
        };
        StrategyRewardConfig {
            format_version: FORMAT_VERSION,
            score_goal,
            receive_goal: Rational64::from_integer(-1),
            cause_fault: Rational64::new(-1, 3),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "balanced" => Ok(Strategy::Balanced),
            "aggressive" => Ok(Strategy::Aggressive),
            "defensive" => Ok(Strategy::Defensive),
            other => Err(ConfigError::Invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

mod ratio_text {
    use num_rational::Rational64;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational64, D::Error> {
        let text = String::deserialize(d)?;
        text.trim()
            .parse::<Rational64>()
            .map_err(|e| serde::de::Error::custom(format!("bad ratio `{text}`: {e}")))
    }
}

/// Sparse reward table of one strategy, kept as exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyRewardConfig {
    pub format_version: u32,
    #[serde(with = "ratio_text")]
    pub score_goal: Rational64,
    #[serde(with = "ratio_text")]
    pub receive_goal: Rational64,
    #[serde(with = "ratio_text")]
    pub cause_fault: Rational64,
}

impl StrategyRewardConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        crate::config::load(path)
    }
}

/// Reward for `side` on an event. Opponent faults and stuck resets are
/// worth nothing; so is every non-terminal record.
pub fn reward(event: &MatchEvent, side: Side, strategy: &StrategyRewardConfig) -> Rational64 {
    let zero = Rational64::from_integer(0);
    match (event.kind, event.side) {
        (EventKind::Goal, Some(s)) if s == side => strategy.score_goal,
        (EventKind::Goal, Some(_)) => strategy.receive_goal,
        (EventKind::Fault, Some(s)) if s == side => strategy.cause_fault,
        _ => zero,
    }
}

pub fn ratio_to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Learner-side stochasticity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub format_version: u32,
    /// Gaussian observation noise, normalized units.
    pub obs_noise_sigma: f64,
    /// Gaussian action noise, normalized units.
    pub action_noise_sigma: f64,
    /// Standard deviation of each puck velocity impulse component (m/s).
    pub disturbance_impulse_sigma: f64,
    /// Mean number of disturbances per second of play.
    pub disturbance_rate: f64,
    pub tracking_loss_prob: f64,
    pub tracking_loss_mean_duration: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            obs_noise_sigma: 0.005,
            action_noise_sigma: 0.01,
            disturbance_impulse_sigma: 0.05,
            disturbance_rate: 0.2,
            tracking_loss_prob: 0.01,
            tracking_loss_mean_duration: 10.0,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            obs_noise_sigma: 0.0,
            action_noise_sigma: 0.0,
            disturbance_impulse_sigma: 0.0,
            disturbance_rate: 0.0,
            tracking_loss_prob: 0.0,
            tracking_loss_mean_duration: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let non_neg = [
            self.obs_noise_sigma,
            self.action_noise_sigma,
            self.disturbance_impulse_sigma,
            self.disturbance_rate,
            self.tracking_loss_mean_duration,
        ];
        if non_neg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(ConfigError::Invalid("noise: values must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.tracking_loss_prob) {
            return Err(ConfigError::Invalid("noise: tracking_loss_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let cfg: Self = crate::config::load(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The part of the config that affects an individual agent's sensing and
    /// actuation; world disturbances are excluded.
    pub fn is_silent_for_agent(&self) -> bool {
        self.obs_noise_sigma == 0.0 && self.action_noise_sigma == 0.0 && self.tracking_loss_prob == 0.0
    }
}

/// Adds a zero-mean Gaussian impulse to the puck velocity using the world's
/// generator. A zero sigma leaves the world, generator included, untouched.
pub fn apply_disturbance(world: &mut WorldState, noise: &NoiseConfig) {
    let sigma = noise.disturbance_impulse_sigma;
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let dx = normal.sample(&mut world.rng);
    let dy = normal.sample(&mut world.rng);
    world.puck.velocity += Vector2::new(dx, dy) * world.mirror_sign();
}

/// Reachable rectangle of one agent in its own frame (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Workspace {
    /// Own table half inset by the mallet radius, shortened along x so that
    /// all four corners lie within `reach_radius` of the arm base.
    pub fn new(table: &TableSpec, base_xy: [f64; 2], reach_radius: f64) -> Result<Self, ConfigError> {
        let r = table.mallet_radius;
        let x_min = -table.half_length() + r;
        let y_max = table.half_width() - r;
        let y_min = -y_max;
        let dy = (y_max - base_xy[1]).abs().max((y_min - base_xy[1]).abs());
        if reach_radius <= dy {
            return Err(ConfigError::Invalid("reach radius does not cover the table width".into()));
        }
        let x_max = (base_xy[0] + (reach_radius * reach_radius - dy * dy).sqrt()).min(-r);
        if x_max <= x_min {
            return Err(ConfigError::Invalid("empty workspace".into()));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn denormalize(&self, action: Action) -> [f64; 2] {
        let lerp = |a: f64, lo: f64, hi: f64| lo + 0.5 * (a + 1.0) * (hi - lo);
        [
            lerp(action[0], self.x_min, self.x_max),
            lerp(action[1], self.y_min, self.y_max),
        ]
    }

    pub fn normalize(&self, point: [f64; 2]) -> Action {
        let inv = |p: f64, lo: f64, hi: f64| 2.0 * (p - lo) / (hi - lo) - 1.0;
        [
            inv(point[0], self.x_min, self.x_max),
            inv(point[1], self.y_min, self.y_max),
        ]
    }
}

/// Converts a table-frame vector into `side`'s frame (and back: the map is
/// an involution).
pub fn to_agent_frame(side: Side, v: Vector2<f64>) -> Vector2<f64> {
    match side {
        Side::A => v,
        Side::B => -v,
    }
}

/// Noise-free normalized reading of the world from `side`'s point of view.
pub fn raw_frame(world: &WorldState, side: Side, chain: &KinematicChain, table: &TableSpec, rules: &RulesConfig) -> Frame {
    let clamp = |v: f64| v.clamp(-1.0, 1.0);
    let norm_xy = |p: Vector2<f64>| {
        let q = to_agent_frame(side, p);
        [clamp(q.x / table.half_length()), clamp(q.y / table.half_width())]
    };
    let own = side.index();
    let mut joints = [0.0; ARM_DOF];
    for (i, out) in joints.iter_mut().enumerate() {
        let [lo, hi] = chain.pos_limits(i);
        *out = clamp(2.0 * (world.joints[own].positions[i] - lo) / (hi - lo) - 1.0);
    }
    let angle = match side {
        Side::A => world.puck.angle,
        Side::B => world.puck.angle + std::f64::consts::PI,
    };
    let (s, c) = angle.sin_cos();
    let own_t = world.fault_timers[own];
    let opp_t = world.fault_timers[side.opponent().index()];
    let fault_timer = clamp((opp_t - own_t) / rules.fault_limit_s);
    Frame {
        joints,
        own_mallet: norm_xy(world.mallets[own].position),
        opp_mallet: norm_xy(world.mallets[side.opponent().index()].position),
        puck: norm_xy(world.puck.position),
        orientation: [s, c],
        fault_timer,
    }
}

/// Produces `side`'s next observation and advances its stack.
///
/// With a non-silent `noise`, Gaussian noise is added to every component and
/// the result clamped to [-1, 1]; during simulated tracking loss the puck
/// position and orientation repeat the previous newest entries.
#[allow(clippy::too_many_arguments)]
pub fn observe(
    world: &WorldState,
    side: Side,
    chain: &KinematicChain,
    table: &TableSpec,
    rules: &RulesConfig,
    stack: &mut ObservationStack,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Observation {
    let mut frame = raw_frame(world, side, chain, table, rules);
    if noise.obs_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.obs_noise_sigma).expect("sigma validated");
        frame.for_each_mut(|v| *v = (*v + normal.sample(rng)).clamp(-1.0, 1.0));
    }
    if stack.is_initialized() {
        if stack.tracking_lost_for == 0 && noise.tracking_loss_prob > 0.0 && rng.random_bool(noise.tracking_loss_prob) {
            let mean = noise.tracking_loss_mean_duration.max(1.0);
            let extra = Geometric::new(1.0 / mean).expect("valid probability").sample(rng);
            stack.tracking_lost_for = 1 + extra.min(u32::MAX as u64 - 1) as u32;
        }
        if stack.tracking_lost_for > 0 {
            stack.tracking_lost_for -= 1;
            frame.puck = stack.puck_position[0];
            frame.orientation = stack.puck_orientation[0];
        }
    }
    stack.push(&frame);
    stack.flatten()
}

/// Outcome of decoding one action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutcome {
    pub command: JointCommand,
    /// The action was non-finite and replaced by holding position.
    pub held: bool,
}

/// Decodes a normalized action into a joint command for the next cycle.
#[allow(clippy::too_many_arguments)]
pub fn act(
    world: &WorldState,
    side: Side,
    action: Action,
    chain: &KinematicChain,
    table: &TableSpec,
    workspace: &Workspace,
    noise: &NoiseConfig,
    cycle_s: f64,
    rng: &mut impl Rng,
) -> Result<ActOutcome, EnvError> {
    let joints = &world.joints[side.index()];
    let (current, jac) = chain.forward_with_jacobian(&joints.positions)?;
    let held = !(action[0].is_finite() && action[1].is_finite());
    let target = if held {
        log::warn!("side {}: non-finite action {:?}, holding position", side.as_str(), action);
        [current.x, current.y]
    } else {
        let mut a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        if noise.action_noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise.action_noise_sigma).expect("sigma validated");
            for v in &mut a {
                *v = (*v + normal.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        workspace.denormalize(a)
    };
    let displacement = CartesianDisplacement::new(
        target[0] - current.x,
        target[1] - current.y,
        table.plane_height - current.z,
    );
    let command = chain.resolve_with_jacobian(joints, &jac, displacement, cycle_s)?;
    Ok(ActOutcome { command, held })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    /// Goals, faults and stuck resets terminate the episode.
    #[default]
    Episodic,
    /// Play continues through faceoffs until the match clock runs out.
    Match,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub rules: RulesConfig,
    pub mode: EnvMode,
    pub substeps: u32,
    pub reach_radius: f64,
    /// Home mallet position in the agent frame (m).
    pub home: [f64; 2],
    pub noise: NoiseConfig,
    /// Which sides receive observation/action noise and tracking loss.
    pub noisy_sides: [bool; 2],
    /// Episodic mode only: truncate after this many steps (0 disables).
    pub max_episode_steps: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            rules: RulesConfig::default(),
            mode: EnvMode::Episodic,
            substeps: 10,
            reach_radius: 1.02,
            home: [-0.8, 0.0],
            noise: NoiseConfig::none(),
            noisy_sides: [false, false],
            max_episode_steps: 0,
        }
    }
}

impl EnvConfig {
    pub fn cycle_s(&self) -> f64 {
        self.rules.step_seconds()
    }

    /// Learner on side A with `noise`; the opponent stays noise-free.
    pub fn training(noise: NoiseConfig) -> Self {
        Self {
            noise,
            noisy_sides: [true, false],
            max_episode_steps: 3000,
            ..Self::default()
        }
    }

    pub fn evaluation() -> Self {
        Self {
            mode: EnvMode::Match,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: [Observation; 2],
    pub events: Vec<MatchEvent>,
    pub rewards: [Rational64; 2],
    /// A goal, fault or stuck reset happened this step.
    pub terminal: bool,
    /// Episodic mode hit `max_episode_steps`.
    pub truncated: bool,
    pub match_over: bool,
}

/// Two-agent air hockey environment.
#[derive(Debug, Clone)]
pub struct AirHockeyEnv {
    table: TableSpec,
    chain: KinematicChain,
    config: EnvConfig,
    workspace: Workspace,
    home_joints: Vec<f64>,
    world: Option<WorldState>,
    stacks: [ObservationStack; 2],
    silent: NoiseConfig,
    strategy: StrategyRewardConfig,
    /// Drives observation noise, action noise and tracking loss; the world's
    /// own generator drives faceoffs and disturbances.
    sensor_rng: ChaCha8Rng,
    episode_steps: u32,
    held_actions: u64,
}

/// Extra distance (m) covered by the exact mallet path check, enough for a
/// puck struck by the other mallet within the same cycle.
const EXACT_PATH_SLACK: f64 = 0.1;

const HOME_SEED: [f64; ARM_DOF] = [0.0, 0.7, 0.0, -1.4, 0.0, 0.9, 0.0];

impl AirHockeyEnv {
    pub fn new(table: TableSpec, chain: KinematicChain, mut config: EnvConfig) -> Result<Self, EnvError> {
        table.validate()?;
        config.noise.validate()?;
        if chain.joint_count() != ARM_DOF {
            return Err(EnvError::ChainDof(chain.joint_count()));
        }
        let workspace = Workspace::new(&table, chain.base_xy(), config.reach_radius)?;
        // Puck centres this close to the centre line are out of every mallet's reach.
        config.rules.unreachable_half_width =
            (-workspace.x_max - table.mallet_radius - table.puck_radius).max(0.0);
        let home = Vector3::new(config.home[0], config.home[1], table.plane_height);
        let (home_joints, residual) = chain.solve_position(&HOME_SEED, home, 500)?;
        if residual > 1e-6 {
            return Err(EnvError::HomeUnreachable(residual));
        }
        Ok(Self {
            table,
            chain,
            config,
            workspace,
            home_joints,
            world: None,
            stacks: Default::default(),
            silent: NoiseConfig::none(),
            strategy: Strategy::Balanced.rewards(),
            sensor_rng: ChaCha8Rng::seed_from_u64(0),
            episode_steps: 0,
            held_actions: 0,
        })
    }

    pub fn with_defaults(config: EnvConfig) -> Result<Self, EnvError> {
        Self::new(TableSpec::default(), KinematicChain::iiwa14_approx(), config)
    }

    pub fn set_strategy(&mut self, strategy: StrategyRewardConfig) {
        self.strategy = strategy;
    }

    pub fn table(&self) -> &TableSpec {
        &self.table
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn home_joints(&self) -> &[f64] {
        &self.home_joints
    }

    pub fn world(&self) -> Option<&WorldState> {
        self.world.as_ref()
    }

    /// Mutable world access for tests and scenario setup. Observation stacks
    /// are not refreshed.
    pub fn world_mut(&mut self) -> Option<&mut WorldState> {
        self.world.as_mut()
    }

    /// Count of non-finite actions replaced by holding position.
    pub fn held_actions(&self) -> u64 {
        self.held_actions
    }

    fn mallet_from_joints(&self, side: Side, positions: &[f64]) -> Result<Vector2<f64>, EnvError> {
        let p = self.chain.forward_kinematics(positions)?;
        Ok(to_agent_frame(side, Vector2::new(p.x, p.y)))
    }

    /// Starts a new match or episode: both arms at home, puck faced off on a
    /// random side.
    pub fn reset(&mut self, seed: u64) -> Result<[Observation; 2], EnvError> {
        self.reset_with(seed, false)
    }

    /// Like [`reset`](Self::reset); with `mirrored` set, the world's random
    /// placements are the half-turn image of the unmirrored run with the same
    /// seed.
    pub fn reset_with(&mut self, seed: u64, mirrored: bool) -> Result<[Observation; 2], EnvError> {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        self.sensor_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e45_0a11_c0de_f00d);
        let joints = [
            JointState::at_rest(self.home_joints.clone()),
            JointState::at_rest(self.home_joints.clone()),
        ];
        let mallets = [
            MalletState {
                position: self.mallet_from_joints(Side::A, &self.home_joints)?,
                velocity: Vector2::zeros(),
            },
            MalletState {
                position: self.mallet_from_joints(Side::B, &self.home_joints)?,
                velocity: Vector2::zeros(),
            },
        ];
        let mut world = WorldState::new(PuckState::default(), mallets, joints, rng);
        world.mirrored = mirrored;
        let side = world.random_side();
        rules::faceoff(&mut world, side, &self.config.rules);
        apply_disturbance(&mut world, &self.config.noise);
        self.world = Some(world);
        self.episode_steps = 0;
        for s in &mut self.stacks {
            s.clear();
        }
        Ok(self.observe_both())
    }

    fn observe_both(&mut self) -> [Observation; 2] {
        let world = self.world.as_ref().expect("reset before observe");
        let mut out = [Observation([0.0; OBS_DIM]); 2];
        for side in Side::BOTH {
            let noise = if self.config.noisy_sides[side.index()] {
                &self.config.noise
            } else {
                &self.silent
            };
            out[side.index()] = observe(
                world,
                side,
                &self.chain,
                &self.table,
                &self.config.rules,
                &mut self.stacks[side.index()],
                noise,
                &mut self.sensor_rng,
            );
        }
        out
    }

    /// Advances one control cycle with `actions[side.index()]` for each side.
    pub fn step(&mut self, actions: [Action; 2]) -> Result<StepResult, EnvError> {
        let mut world = self.world.take().ok_or(EnvError::NotReset)?;
        let result = self.step_world(&mut world, actions);
        self.world = Some(world);
        let (events, terminal) = result?;

        if terminal && self.config.mode == EnvMode::Match {
            for s in &mut self.stacks {
                s.clear();
            }
        }
        let observations = self.observe_both();
        let mut rewards = [Rational64::from_integer(0); 2];
        for e in &events {
            for side in Side::BOTH {
                rewards[side.index()] += reward(e, side, &self.strategy);
            }
        }
        self.episode_steps += 1;
        let truncated = self.config.mode == EnvMode::Episodic
            && self.config.max_episode_steps > 0
            && self.episode_steps >= self.config.max_episode_steps
            && !terminal;
        let match_over = events.iter().any(|e| e.kind == EventKind::MatchEnd);
        Ok(StepResult {
            observations,
            events,
            rewards,
            terminal,
            truncated,
            match_over,
        })
    }

    fn step_world(&mut self, world: &mut WorldState, actions: [Action; 2]) -> Result<(Vec<MatchEvent>, bool), EnvError> {
        let cycle = self.config.cycle_s();
        let mut commands = Vec::with_capacity(2);
        for side in Side::BOTH {
            let noise = if self.config.noisy_sides[side.index()] {
                &self.config.noise
            } else {
                &self.silent
            };
            let outcome = act(
                world,
                side,
                actions[side.index()],
                &self.chain,
                &self.table,
                &self.workspace,
                noise,
                cycle,
                &mut self.sensor_rng,
            )?;
            if outcome.held {
                self.held_actions += 1;
            }
            commands.push(outcome.command);
        }

        let substeps = self.config.substeps.max(1);
        let dt = cycle / substeps as f64;
        let starts: Vec<Vec<f64>> = Side::BOTH
            .iter()
            .map(|s| world.joints[s.index()].positions.clone())
            .collect();
        let mut ends = [Vector2::zeros(); 2];
        let mut exact = [false; 2];
        // Only evaluate per-substep forward kinematics when the puck can be
        // within reach of a mallet during this cycle; elsewhere the mallet
        // path is linearly interpolated, which cannot affect contacts.
        let margin = self.table.puck_radius
            + self.table.mallet_radius
            + world.puck.velocity.norm() * cycle
            + EXACT_PATH_SLACK;
        for side in Side::BOTH {
            let i = side.index();
            ends[i] = self.mallet_from_joints(side, &commands[i].positions)?;
            let start = world.mallets[i].position;
            exact[i] = segment_distance(world.puck.position, start, ends[i]) < margin;
        }
        let starts_xy = [world.mallets[0].position, world.mallets[1].position];
        let mut previous = starts_xy;
        let mut q = vec![0.0; ARM_DOF];
        for k in 1..=substeps {
            let s = k as f64 / substeps as f64;
            for side in Side::BOTH {
                let i = side.index();
                let position = if k == substeps {
                    ends[i]
                } else if exact[i] {
                    for (j, qj) in q.iter_mut().enumerate() {
                        *qj = starts[i][j] + s * commands[i].displacement[j];
                    }
                    self.mallet_from_joints(side, &q)?
                } else {
                    starts_xy[i] + (ends[i] - starts_xy[i]) * s
                };
                world.mallets[i].velocity = (position - previous[i]) / dt;
                world.mallets[i].position = position;
                previous[i] = position;
            }
            physics::substep(world, &self.table, dt);
            if physics::detect_goal(&world.puck, &self.table).is_some() {
                break;
            }
        }
        for side in Side::BOTH {
            let i = side.index();
            world.mallets[i].position = ends[i];
            world.mallets[i].velocity = (ends[i] - starts_xy[i]) / cycle;
            world.joints[i].positions.clone_from(&commands[i].positions);
            world.joints[i].velocities.clone_from(&commands[i].velocities);
        }

        let noise = &self.config.noise;
        if noise.disturbance_impulse_sigma > 0.0 && noise.disturbance_rate > 0.0 {
            let p = (noise.disturbance_rate * cycle).min(1.0);
            if world.rng.random_bool(p) {
                apply_disturbance(world, noise);
            }
        }
        let events = rules::update_rules(world, &self.table, &self.config.rules)?;
        let terminal = events.iter().any(|e| e.kind.is_terminal());
        Ok((events, terminal))
    }
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}
