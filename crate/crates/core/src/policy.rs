//! Policies: frozen parameter snapshots, scripted opponents, a small
//! feed-forward learner trained by evolution strategies, and the EMA action
//! filter.
//!
//! A [`PolicySnapshot`] is immutable once built. Stateful behaviour (action
//! smoothing, strategy switching) lives in [`Agent`] implementations that
//! wrap snapshots.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::FORMAT_VERSION;
use crate::env::{ratio_to_f64, Action, AirHockeyEnv, EnvError, Observation, Strategy, Workspace, OBS_DIM};
use crate::physics::Side;

const CHECKPOINT_MAGIC: &str = "AIRHOCKEY-POLICY";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation has {found} values, expected {OBS_DIM}")]
    ObservationDim { found: usize },
    #[error("{kind} expects {expected} parameters, got {found}")]
    ParameterCount {
        kind: PolicyKind,
        expected: usize,
        found: usize,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ema alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScriptedVariant {
    /// Parks on the defence line and shadows the puck; never attacks.
    PassiveBlocker,
    /// Shadows the puck from home depth with random target jitter.
    RandomJitterer,
    /// Holds the home position.
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    ScriptedBaseline,
    ScriptedVariant(ScriptedVariant),
    /// 40 -> hidden (tanh) -> 2 (tanh).
    ToyLearner { hidden: usize },
}

impl PolicyKind {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            PolicyKind::ScriptedBaseline => vec![BASELINE_DEFAULTS.len()],
            PolicyKind::ScriptedVariant(ScriptedVariant::PassiveBlocker) => vec![1],
            PolicyKind::ScriptedVariant(ScriptedVariant::RandomJitterer) => vec![1],
            PolicyKind::ScriptedVariant(ScriptedVariant::Idle) => vec![0],
            PolicyKind::ToyLearner { hidden } => vec![OBS_DIM, *hidden, 2],
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            PolicyKind::ToyLearner { hidden } => hidden * OBS_DIM + hidden + 2 * hidden + 2,
            _ => self.dims()[0],
        }
    }

    fn from_parts(kind: &str, dims: &[usize]) -> Result<Self, PolicyError> {
        let bad = || PolicyError::Checkpoint(format!("unknown kind `{kind}` with dims {dims:?}"));
        Ok(match kind {
            "scripted_baseline" => PolicyKind::ScriptedBaseline,
            "scripted_variant:passive_blocker" => PolicyKind::ScriptedVariant(ScriptedVariant::PassiveBlocker),
            "scripted_variant:random_jitterer" => PolicyKind::ScriptedVariant(ScriptedVariant::RandomJitterer),
            "scripted_variant:idle" => PolicyKind::ScriptedVariant(ScriptedVariant::Idle),
            "toy_learner" => match dims {
                [OBS_DIM, hidden, 2] if *hidden > 0 => PolicyKind::ToyLearner { hidden: *hidden },
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PolicyKind::ScriptedBaseline => "scripted_baseline",
            PolicyKind::ScriptedVariant(ScriptedVariant::PassiveBlocker) => "scripted_variant:passive_blocker",
            PolicyKind::ScriptedVariant(ScriptedVariant::RandomJitterer) => "scripted_variant:random_jitterer",
            PolicyKind::ScriptedVariant(ScriptedVariant::Idle) => "scripted_variant:idle",
            PolicyKind::ToyLearner { .. } => "toy_learner",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotMetadata {
    pub strategy: Option<Strategy>,
    pub episode: u64,
    pub format_version: u32,
}

impl Default for SnapshotMetadata {
    fn default() -> Self {
        Self {
            strategy: None,
            episode: 0,
            format_version: FORMAT_VERSION,
        }
    }
}

/// Frozen policy parameters. Cloning shares the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    kind: PolicyKind,
    parameters: Arc<[f64]>,
    metadata: SnapshotMetadata,
}

/// Defence depth (m from own goal line), maximum puck speed for a lunge
/// (m/s), lunge overshoot past the puck (m), inbound speed that triggers
/// defence (m/s).
const BASELINE_DEFAULTS: [f64; 4] = [0.18, 1.2, 0.10, 0.05];

impl PolicySnapshot {
    pub fn new(kind: PolicyKind, parameters: Vec<f64>, metadata: SnapshotMetadata) -> Result<Self, PolicyError> {
        let expected = kind.parameter_count();
        if parameters.len() != expected {
            return Err(PolicyError::ParameterCount {
                kind,
                expected,
                found: parameters.len(),
            });
        }
        if parameters.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            kind,
            parameters: parameters.into(),
            metadata,
        })
    }

    pub fn scripted_baseline() -> Self {
        Self::new(PolicyKind::ScriptedBaseline, BASELINE_DEFAULTS.to_vec(), Default::default())
            .expect("default parameters match")
    }

    pub fn passive_blocker() -> Self {
        Self::new(
            PolicyKind::ScriptedVariant(ScriptedVariant::PassiveBlocker),
            vec![0.12],
            Default::default(),
        )
        .expect("default parameters match")
    }

    /// `amplitude` is the jitter half-width in normalized action units.
    pub fn random_jitterer() -> Self {
        Self::new(
            PolicyKind::ScriptedVariant(ScriptedVariant::RandomJitterer),
            vec![0.35],
            Default::default(),
        )
        .expect("default parameters match")
    }

    pub fn idle() -> Self {
        Self::new(PolicyKind::ScriptedVariant(ScriptedVariant::Idle), vec![], Default::default())
            .expect("default parameters match")
    }

    pub fn toy_learner_zeros(hidden: usize) -> Self {
        let kind = PolicyKind::ToyLearner { hidden };
        Self::new(kind, vec![0.0; kind.parameter_count()], Default::default()).expect("sized to kind")
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn metadata(&self) -> &SnapshotMetadata {
        &self.metadata
    }

    /// Copy of this snapshot with different metadata; parameters are shared.
    pub fn with_metadata(&self, metadata: SnapshotMetadata) -> Self {
        Self {
            kind: self.kind,
            parameters: Arc::clone(&self.parameters),
            metadata,
        }
    }

    /// Short identity used in logs and manifests.
    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::ToyLearner { .. } => format!(
                "toy_learner[{}@{}:{}]",
                self.metadata.strategy.map_or("none", Strategy::as_str),
                self.metadata.episode,
                &crate::config::bytes_hash(self.to_text().as_bytes())[..8]
            ),
            kind => kind.to_string(),
        }
    }

    /// Computes the action for `obs`. Pure with respect to the snapshot; only
    /// the random jitterer draws from `rng`.
    pub fn act(&self, obs: &[f64], geometry: &PolicyGeometry, rng: &mut impl Rng) -> Result<Action, PolicyError> {
        if obs.len() != OBS_DIM {
            return Err(PolicyError::ObservationDim { found: obs.len() });
        }
        let obs = Observation(obs.try_into().expect("length checked"));
        let p = &self.parameters;
        let action = match self.kind {
            PolicyKind::ToyLearner { hidden } => mlp_forward(p, hidden, obs.as_slice()),
            PolicyKind::ScriptedBaseline => scripted_baseline(p, &obs, geometry),
            PolicyKind::ScriptedVariant(ScriptedVariant::PassiveBlocker) => {
                let puck = geometry.to_meters(obs.puck(0));
                let prev = geometry.to_meters(obs.puck(1));
                geometry.to_action(defend_point(p[0], puck, prev, geometry))
            }
            PolicyKind::ScriptedVariant(ScriptedVariant::RandomJitterer) => {
                let puck = geometry.to_meters(obs.puck(0));
                let target = [geometry.home[0], puck[1].clamp(-0.5 * geometry.goal_width, 0.5 * geometry.goal_width)];
                let a = geometry.to_action(target);
                let amp = p[0].abs();
                [
                    a[0] + rng.random_range(-amp..=amp),
                    a[1] + rng.random_range(-amp..=amp),
                ]
            }
            PolicyKind::ScriptedVariant(ScriptedVariant::Idle) => geometry.to_action(geometry.home),
        };
        Ok(clamp_action(action))
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.kind.dims().iter().map(|d| d.to_string()).collect();
        let mut out = format!(
            "magic {CHECKPOINT_MAGIC}\nformat_version {}\nkind {}\ndims {}\nstrategy {}\nepisode {}\n",
            self.metadata.format_version,
            self.kind,
            dims.join(" "),
            self.metadata.strategy.map_or("none", Strategy::as_str),
            self.metadata.episode,
        );
        for v in self.parameters.iter() {
            // `{}` prints the shortest representation that parses back exactly.
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<String, PolicyError> {
            let line = lines
                .next()
                .ok_or_else(|| PolicyError::Checkpoint(format!("missing `{name}`")))?;
            match line.split_once(' ') {
                Some((key, value)) if key == name => Ok(value.trim().to_string()),
                _ if line == name => Ok(String::new()),
                _ => Err(PolicyError::Checkpoint(format!("expected `{name}`, found `{line}`"))),
            }
        };
        if field("magic")? != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let format_version: u32 = field("format_version")?
            .parse()
            .map_err(|_| PolicyError::Checkpoint("bad format_version".into()))?;
        if format_version != FORMAT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported format_version {format_version}")));
        }
        let kind = field("kind")?;
        let dims: Vec<usize> = field("dims")?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| PolicyError::Checkpoint("bad dims".into())))
            .collect::<Result<_, _>>()?;
        let kind = PolicyKind::from_parts(&kind, &dims)?;
        if kind.dims() != dims {
            return Err(PolicyError::Checkpoint(format!("dims {dims:?} do not match {kind}")));
        }
        let strategy = match field("strategy")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| PolicyError::Checkpoint(format!("bad strategy `{s}`")))?),
        };
        let episode = field("episode")?
            .parse()
            .map_err(|_| PolicyError::Checkpoint("bad episode".into()))?;
        let parameters = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| PolicyError::Checkpoint(format!("bad parameter `{l}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            kind,
            parameters,
            SnapshotMetadata {
                strategy,
                episode,
                format_version,
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn clamp_action(a: Action) -> Action {
    let c = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    [c(a[0]), c(a[1])]
}

fn mlp_forward(p: &[f64], hidden: usize, obs: &[f64]) -> Action {
    let (w1, rest) = p.split_at(hidden * OBS_DIM);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(2 * hidden);
    let mut h = vec![0.0; hidden];
    for (j, hj) in h.iter_mut().enumerate() {
        let row = &w1[j * OBS_DIM..(j + 1) * OBS_DIM];
        let z: f64 = row.iter().zip(obs).map(|(w, x)| w * x).sum::<f64>() + b1[j];
        *hj = z.tanh();
    }
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w2[k * hidden..(k + 1) * hidden];
        *o = (row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + b2[k]).tanh();
    }
    out
}

/// Table and workspace geometry scripted policies need to turn normalized
/// observations into metric targets and back into actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGeometry {
    pub half_length: f64,
    pub half_width: f64,
    pub goal_width: f64,
    pub puck_radius: f64,
    pub mallet_radius: f64,
    pub workspace: Workspace,
    pub home: [f64; 2],
    pub cycle_s: f64,
}

impl PolicyGeometry {
    pub fn from_env(env: &AirHockeyEnv) -> Self {
        let t = env.table();
        Self {
            half_length: t.half_length(),
            half_width: t.half_width(),
            goal_width: t.goal_width,
            puck_radius: t.puck_radius,
            mallet_radius: t.mallet_radius,
            workspace: *env.workspace(),
            home: env.config().home,
            cycle_s: env.config().cycle_s(),
        }
    }

    pub fn to_meters(&self, normalized: [f64; 2]) -> [f64; 2] {
        [normalized[0] * self.half_length, normalized[1] * self.half_width]
    }

    pub fn to_action(&self, point: [f64; 2]) -> Action {
        self.workspace.normalize(point)
    }

    fn reach(&self) -> f64 {
        self.puck_radius + self.mallet_radius
    }
}

/// Target on the defence line `depth` metres in front of the own goal line,
/// shadowing the puck's extrapolated crossing point.
fn defend_point(depth: f64, puck: [f64; 2], prev: [f64; 2], g: &PolicyGeometry) -> [f64; 2] {
    let line_x = -g.half_length + depth;
    let vx = puck[0] - prev[0];
    let vy = puck[1] - prev[1];
    let mut y = puck[1];
    if vx < -1e-6 {
        let steps = (line_x - puck[0]) / vx;
        y = puck[1] + vy * steps;
        // Fold off the side walls.
        let lim = g.half_width - g.puck_radius;
        let period = 4.0 * lim;
        let mut u = (y + lim).rem_euclid(period);
        if u > 2.0 * lim {
            u = period - u;
        }
        y = u - lim;
    }
    let cover = 0.5 * g.goal_width + g.mallet_radius;
    [line_x, y.clamp(-cover, cover)]
}

/// Rule table of the scripted baseline, evaluated top to bottom on the
/// newest two puck observations:
///
/// 1. Puck on own half, within mallet reach and slower than the lunge speed:
///    strike it toward the opponent goal (approach from behind first).
/// 2. Puck inbound faster than the defence trigger, or on the opponent half:
///    shadow it on the defence line.
/// 3. Otherwise retreat to the home position.
fn scripted_baseline(p: &[f64], obs: &Observation, g: &PolicyGeometry) -> Action {
    let [depth, lunge_speed, overshoot, inbound] = [p[0], p[1], p[2], p[3]];
    let puck = g.to_meters(obs.puck(0));
    let prev = g.to_meters(obs.puck(1));
    let mallet = g.to_meters(obs.own_mallet(0));
    let vx = (puck[0] - prev[0]) / g.cycle_s;
    let vy = (puck[1] - prev[1]) / g.cycle_s;
    let speed = (vx * vx + vy * vy).sqrt();
    let ws = &g.workspace;
    let reachable = puck[0] < 0.0
        && puck[0] <= ws.x_max + g.reach()
        && puck[0] >= ws.x_min - g.reach()
        && puck[1].abs() <= ws.y_max + g.reach();

    if reachable && speed < lunge_speed {
        let goal = [g.half_length, 0.0];
        let (dx, dy) = (goal[0] - puck[0], goal[1] - puck[1]);
        let n = (dx * dx + dy * dy).sqrt().max(1e-9);
        let u = [dx / n, dy / n];
        let behind = mallet[0] < puck[0] - 0.5 * g.reach();
        let target = if behind {
            [puck[0] + overshoot * u[0], puck[1] + overshoot * u[1]]
        } else {
            // Swing around the puck to get behind it.
            let side = if mallet[1] >= puck[1] { 1.0 } else { -1.0 };
            let back = g.reach() + 0.04;
            [puck[0] - back * u[0], puck[1] - back * u[1] + side * 0.6 * g.reach()]
        };
        return g.to_action(target);
    }
    if vx < -inbound || puck[0] >= 0.0 {
        return g.to_action(defend_point(depth, puck, prev, g));
    }
    g.to_action(g.home)
}

/// Exponential moving average over actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaFilterState {
    alpha: f64,
    last_output: Action,
}

impl EmaFilterState {
    pub const DEFAULT_ALPHA: f64 = 0.3;

    pub fn new(alpha: f64, initial: Action) -> Result<Self, PolicyError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(PolicyError::Alpha(alpha));
        }
        Ok(Self {
            alpha,
            last_output: initial,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn last_output(&self) -> Action {
        self.last_output
    }

    /// `out = alpha * action + (1 - alpha) * last_output`.
    pub fn apply(&mut self, action: Action) -> Action {
        let a = self.alpha;
        let out = [
            a * action[0] + (1.0 - a) * self.last_output[0],
            a * action[1] + (1.0 - a) * self.last_output[1],
        ];
        self.last_output = out;
        out
    }
}

/// A stateful actor driven once per control step.
pub trait Agent: Send {
    /// Called at the start of every match.
    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Action;

    fn label(&self) -> String;
}

/// Snapshot plus geometry and an optional EMA filter.
#[derive(Debug, Clone)]
pub struct SnapshotAgent {
    snapshot: PolicySnapshot,
    geometry: PolicyGeometry,
    ema_alpha: Option<f64>,
    filter: Option<EmaFilterState>,
}

impl SnapshotAgent {
    pub fn new(snapshot: PolicySnapshot, geometry: PolicyGeometry) -> Self {
        Self {
            snapshot,
            geometry,
            ema_alpha: None,
            filter: None,
        }
    }

    pub fn with_ema(mut self, alpha: f64) -> Result<Self, PolicyError> {
        EmaFilterState::new(alpha, [0.0; 2])?;
        self.ema_alpha = Some(alpha);
        Ok(self)
    }

    pub fn snapshot(&self) -> &PolicySnapshot {
        &self.snapshot
    }
}

impl Agent for SnapshotAgent {
    fn reset(&mut self) {
        self.filter = None;
    }

    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Action {
        let raw = self
            .snapshot
            .act(obs.as_slice(), &self.geometry, rng)
            .expect("observation has the fixed dimension");
        match self.ema_alpha {
            None => raw,
            Some(alpha) => {
                // The first filtered action starts from the current mallet target.
                let filter = self.filter.get_or_insert_with(|| {
                    let start = self.geometry.to_action(self.geometry.to_meters(obs.own_mallet(0)));
                    EmaFilterState::new(alpha, clamp_action(start)).expect("alpha validated")
                });
                filter.apply(raw)
            }
        }
    }

    fn label(&self) -> String {
        match self.ema_alpha {
            Some(a) => format!("{}+ema{a}", self.snapshot.label()),
            None => self.snapshot.label(),
        }
    }
}

/// Supplies the opponent for each training episode.
pub trait OpponentSource: Send {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> PolicySnapshot;

    /// Called after each training episode with the learner's current
    /// snapshot and the 1-based index of the episode just finished.
    fn on_episode(&mut self, _learner: &PolicySnapshot, _episode_index: u64, _rng: &mut ChaCha8Rng) {}
}

/// Always the same opponent.
#[derive(Debug, Clone)]
pub struct FixedOpponent(pub PolicySnapshot);

impl OpponentSource for FixedOpponent {
    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> PolicySnapshot {
        self.0.clone()
    }
}

/// Evolution-strategies settings for the toy learner.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Antithetic pairs per generation.
    pub population_pairs: usize,
    /// Episodes each population member is evaluated on (shared seeds and
    /// opponents within a generation).
    pub episodes_per_member: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Emit a checkpoint every this many generations.
    pub checkpoint_every: usize,
    /// Scale of the fan-in normalised first-layer initialisation. The output
    /// layer always starts at zero.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            population_pairs: 8,
            episodes_per_member: 4,
            sigma: 0.05,
            learning_rate: 0.03,
            weight_decay: 0.0005,
            checkpoint_every: 5,
            init_scale: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn episodes_per_generation(&self) -> u64 {
        (2 * self.population_pairs * self.episodes_per_member) as u64
    }
}

/// Checkpoints and learning curve of one training run.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    /// Initial snapshot first, then one per checkpoint interval, then the
    /// final parameters if they were not already emitted.
    pub checkpoints: Vec<PolicySnapshot>,
    /// Mean episode return over the whole population, per generation.
    pub generation_returns: Vec<f64>,
    /// Every training episode return in evaluation order.
    pub episode_returns: Vec<f64>,
    pub episodes: u64,
}

impl TrainingRun {
    pub fn latest(&self) -> &PolicySnapshot {
        self.checkpoints.last().expect("initial snapshot always present")
    }
}

/// Decides whether training should stop early given all episode returns so far.
pub type StopCriterion<'a> = &'a (dyn Fn(&[f64]) -> bool + Sync);

/// Plays one episode with the learner on side A. Returns the undiscounted
/// sparse return.
pub fn play_episode(
    env: &mut AirHockeyEnv,
    learner: &PolicySnapshot,
    opponent: &PolicySnapshot,
    geometry: &PolicyGeometry,
    seed: u64,
) -> Result<f64, PolicyError> {
    let mut obs = env.reset(seed)?;
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 2);
    loop {
        let a = learner.act(obs[0].as_slice(), geometry, &mut rng_a)?;
        let b = opponent.act(obs[1].as_slice(), geometry, &mut rng_b)?;
        let step = env.step([a, b])?;
        obs = step.observations;
        if step.terminal || step.truncated || step.match_over {
            return Ok(ratio_to_f64(step.rewards[Side::A.index()]));
        }
    }
}

fn centered_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    // Ties share their mean rank so equal returns give no gradient signal.
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    let denom = (n.max(2) - 1) as f64;
    ranks.iter().map(|r| r / denom - 0.5).collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Trains the toy learner with antithetic evolution strategies on the mean
/// sparse episode return under `strategy`.
///
/// `budget_episodes` bounds the number of training episodes; a budget below
/// one generation returns only the initial snapshot. Population members are
/// evaluated in parallel on clones of `env_template`; results are reduced in
/// member order so runs are reproducible for any thread count.
pub fn train_toy_learner(
    env_template: &AirHockeyEnv,
    opponents: &mut dyn OpponentSource,
    strategy: Strategy,
    budget_episodes: u64,
    config: &TrainConfig,
    stop: Option<StopCriterion<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingRun, PolicyError> {
    let kind = PolicyKind::ToyLearner { hidden: config.hidden };
    let n = kind.parameter_count();
    let geometry = PolicyGeometry::from_env(env_template);
    // Random first layer, zero output layer: the initial policy still acts (0, 0).
    let first_layer = config.hidden * OBS_DIM;
    let fan_in_scale = config.init_scale / (OBS_DIM as f64).sqrt();
    let mut theta: Vec<f64> = (0..n)
        .map(|i| {
            if i < first_layer {
                fan_in_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            } else {
                0.0
            }
        })
        .collect();
    let snapshot_at = |theta: &[f64], episode: u64| {
        PolicySnapshot::new(
            kind,
            theta.to_vec(),
            SnapshotMetadata {
                strategy: Some(strategy),
                episode,
                format_version: FORMAT_VERSION,
            },
        )
    };
    let mut run = TrainingRun {
        checkpoints: vec![snapshot_at(&theta, 0)?],
        generation_returns: Vec::new(),
        episode_returns: Vec::new(),
        episodes: 0,
    };
    let per_gen = config.episodes_per_generation();
    let generations = budget_episodes / per_gen.max(1);
    let mut adam = Adam::new(n);
    let mut emitted_latest = true;
    let mut env_template = env_template.clone();
    env_template.set_strategy(strategy.rewards());

    for generation in 0..generations {
        let noise: Vec<Vec<f64>> = (0..config.population_pairs)
            .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let episodes: Vec<(u64, PolicySnapshot)> = (0..config.episodes_per_member)
            .map(|_| (rng.random::<u64>(), opponents.sample(rng)))
            .collect();

        let members: Vec<(usize, f64)> = (0..config.population_pairs)
            .flat_map(|i| [(i, 1.0), (i, -1.0)])
            .collect();
        let returns: Vec<Result<Vec<f64>, PolicyError>> = members
            .par_iter()
            .map(|&(i, sign)| {
                let params: Vec<f64> = theta
                    .iter()
                    .zip(&noise[i])
                    .map(|(t, e)| t + sign * config.sigma * e)
                    .collect();
                let member = PolicySnapshot::new(kind, params, SnapshotMetadata::default())?;
                let mut env = env_template.clone();
                episodes
                    .iter()
                    .map(|(seed, opp)| play_episode(&mut env, &member, opp, &geometry, *seed))
                    .collect()
            })
            .collect();
        let returns: Vec<Vec<f64>> = returns.into_iter().collect::<Result<_, _>>()?;

        let fitness: Vec<f64> = returns
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
            .collect();
        let ranks = centered_ranks(&fitness);
        let mut grad = vec![0.0; n];
        for (pair, eps) in noise.iter().enumerate() {
            let diff = ranks[2 * pair] - ranks[2 * pair + 1];
            for (g, e) in grad.iter_mut().zip(eps) {
                *g += diff * e;
            }
        }
        let scale = 1.0 / (config.population_pairs as f64 * config.sigma);
        for (g, t) in grad.iter_mut().zip(&theta) {
            *g = *g * scale - config.weight_decay * t;
        }
        adam.ascend(&mut theta, &grad, config.learning_rate);

        run.generation_returns
            .push(fitness.iter().sum::<f64>() / fitness.len().max(1) as f64);
        let start = run.episodes;
        for r in &returns {
            run.episode_returns.extend_from_slice(r);
        }
        run.episodes += per_gen;
        let current = snapshot_at(&theta, run.episodes)?;
        for idx in start + 1..=run.episodes {
            opponents.on_episode(&current, idx, rng);
        }
        emitted_latest = false;
        if (generation + 1) % config.checkpoint_every.max(1) as u64 == 0 {
            run.checkpoints.push(current);
            emitted_latest = true;
        }
        if stop.is_some_and(|f| f(&run.episode_returns)) {
            log::info!("stopping after {} episodes: plateau reached", run.episodes);
            break;
        }
    }
    if !emitted_latest {
        run.checkpoints.push(snapshot_at(&theta, run.episodes)?);
    }
    Ok(run)
}
