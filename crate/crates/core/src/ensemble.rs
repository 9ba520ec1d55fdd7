//! Score-aware switching between the balanced, aggressive and defensive
//! policies during a match.
//!
//! The agent cannot see the scoreboard. [`ScoreEstimator`] reconstructs it
//! from consecutive observations: a faceoff shows up as the fault timer
//! dropping to exactly zero, and the observation just before it tells what
//! ended the rally.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, ConfigError, FORMAT_VERSION};
use crate::env::{Action, AirHockeyEnv, Observation, Strategy};
use crate::policy::{Agent, EmaFilterState, PolicyError, PolicyGeometry, PolicySnapshot, SnapshotAgent};

pub const DEFAULT_DEFENSIVE_MARGIN: i64 = 3;

/// Score as inferred from one side's observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreEstimate {
    pub own_goals: u32,
    pub opp_goals: u32,
    pub own_faults: u32,
    pub opp_faults: u32,
    /// Faceoffs whose cause could not be told from the observations.
    pub ambiguous: u32,
    /// Set once any faceoff was ambiguous.
    pub low_confidence: bool,
}

impl ScoreEstimate {
    pub fn own_points(&self) -> i64 {
        self.own_goals as i64 - (self.own_faults / 3) as i64
    }

    pub fn opp_points(&self) -> i64 {
        self.opp_goals as i64 - (self.opp_faults / 3) as i64
    }
}

/// What the estimator concluded about a detected faceoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceoffCause {
    OwnGoal,
    OppGoal,
    OwnFault,
    OppFault,
    StuckReset,
    Ambiguous,
}

/// Thresholds in normalized observation units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Timer magnitude one step before a fault fires.
    pub fault_saturation: f64,
    /// Puck x beyond which a goal is plausible.
    pub goal_zone_x: f64,
    /// Half-width of the goal aperture plus slack.
    pub aperture_y: f64,
    /// Puck x below which it is out of reach of both mallets.
    pub band_x: f64,
    /// Absolute timer values up to this count as zero.
    pub timer_tolerance: f64,
}

impl EstimatorConfig {
    pub fn from_env(env: &AirHockeyEnv) -> Self {
        let t = env.table();
        let r = &env.config().rules;
        let fault_steps = r.fault_steps().max(1) as f64;
        Self {
            fault_saturation: (fault_steps - 1.0) / fault_steps,
            goal_zone_x: 1.0 - 0.25 / t.half_length(),
            aperture_y: (0.5 * t.goal_width + t.puck_radius) / t.half_width(),
            band_x: (r.unreachable_half_width + 0.05) / t.half_length(),
            timer_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreEstimator {
    config: EstimatorConfig,
    estimate: ScoreEstimate,
    previous: Option<Observation>,
}

impl ScoreEstimator {
    pub fn new(config: EstimatorConfig) -> Self {
        Self {
            config,
            estimate: ScoreEstimate::default(),
            previous: None,
        }
    }

    pub fn estimate(&self) -> &ScoreEstimate {
        &self.estimate
    }

    pub fn reset(&mut self) {
        self.estimate = ScoreEstimate::default();
        self.previous = None;
    }

    /// Feeds the next observation. Returns the cause when it shows a faceoff.
    pub fn update(&mut self, obs: &Observation) -> Option<FaceoffCause> {
        let prev = self.previous.replace(*obs)?;
        let tol = self.config.timer_tolerance;
        let is_faceoff = obs.fault_timer().abs() <= tol && prev.fault_timer().abs() > tol;
        if !is_faceoff {
            return None;
        }
        let cause = self.classify(&prev);
        let e = &mut self.estimate;
        match cause {
            FaceoffCause::OwnGoal => e.own_goals += 1,
            FaceoffCause::OppGoal => e.opp_goals += 1,
            FaceoffCause::OwnFault => e.own_faults += 1,
            FaceoffCause::OppFault => e.opp_faults += 1,
            FaceoffCause::StuckReset => {}
            FaceoffCause::Ambiguous => {
                e.ambiguous += 1;
                e.low_confidence = true;
            }
        }
        Some(cause)
    }

    /// Decides what ended the rally from the last observation before the
    /// faceoff.
    fn classify(&self, last: &Observation) -> FaceoffCause {
        let c = &self.config;
        let p = last.puck(0);
        let q = last.puck(1);
        // Identical consecutive readings mean the tracker was frozen: a
        // moving puck never repeats its position exactly.
        let frozen = p == q;
        let timer = last.fault_timer();
        if !frozen {
            let vx = p[0] - q[0];
            let next_x = p[0] + vx;
            let in_aperture = p[1].abs() <= c.aperture_y;
            if in_aperture && p[0] >= c.goal_zone_x && vx > 0.0 && next_x >= c.goal_zone_x {
                return FaceoffCause::OwnGoal;
            }
            if in_aperture && p[0] <= -c.goal_zone_x && vx < 0.0 && next_x <= -c.goal_zone_x {
                return FaceoffCause::OppGoal;
            }
        }
        if timer.abs() >= c.fault_saturation - 1e-9 {
            // Negative timer: the puck sat on our side.
            return if timer < 0.0 {
                FaceoffCause::OwnFault
            } else {
                FaceoffCause::OppFault
            };
        }
        if !frozen && p[0].abs() <= c.band_x {
            return FaceoffCause::StuckReset;
        }
        FaceoffCause::Ambiguous
    }
}

/// Pure strategy choice from an estimate: aggressive when trailing,
/// defensive when leading by at least `margin`, balanced otherwise.
pub fn select_strategy(estimate: &ScoreEstimate, margin: i64) -> Strategy {
    select_for_points(estimate.own_points(), estimate.opp_points(), margin)
}

pub fn select_for_points(own: i64, opp: i64, margin: i64) -> Strategy {
    if opp > own {
        Strategy::Aggressive
    } else if own - opp >= margin {
        Strategy::Defensive
    } else {
        Strategy::Balanced
    }
}

/// Ensemble manifest: three checkpoint paths and the switching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub balanced: PathBuf,
    pub aggressive: PathBuf,
    pub defensive: PathBuf,
    #[serde(default = "default_margin")]
    pub defensive_margin: i64,
    #[serde(default)]
    pub ema_alpha: Option<f64>,
}

fn default_margin() -> i64 {
    DEFAULT_DEFENSIVE_MARGIN
}

impl EnsembleManifest {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut manifest: Self = config::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut manifest.balanced, &mut manifest.aggressive, &mut manifest.defensive] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if manifest.defensive_margin < 1 {
            return Err(ConfigError::Invalid(format!(
                "defensive_margin must be at least 1, got {}",
                manifest.defensive_margin
            )));
        }
        Ok(manifest)
    }

    pub fn new(balanced: PathBuf, aggressive: PathBuf, defensive: PathBuf) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            balanced,
            aggressive,
            defensive,
            defensive_margin: DEFAULT_DEFENSIVE_MARGIN,
            ema_alpha: None,
        }
    }

    pub fn load_policies(&self) -> Result<[PolicySnapshot; 3], PolicyError> {
        Ok([
            PolicySnapshot::load(&self.balanced)?,
            PolicySnapshot::load(&self.aggressive)?,
            PolicySnapshot::load(&self.defensive)?,
        ])
    }
}

/// Three strategy policies behind one agent, switching at faceoffs.
#[derive(Debug, Clone)]
pub struct EnsemblePolicy {
    policies: [SnapshotAgent; 3],
    estimator: ScoreEstimator,
    active: Strategy,
    margin: i64,
    switches: u32,
    ema_alpha: Option<f64>,
    filter: Option<EmaFilterState>,
    geometry: PolicyGeometry,
}

fn slot(strategy: Strategy) -> usize {
    match strategy {
        Strategy::Balanced => 0,
        Strategy::Aggressive => 1,
        Strategy::Defensive => 2,
    }
}

impl EnsemblePolicy {
    /// `policies` ordered balanced, aggressive, defensive.
    pub fn new(policies: [PolicySnapshot; 3], margin: i64, env: &AirHockeyEnv) -> Self {
        let geometry = PolicyGeometry::from_env(env);
        Self {
            policies: policies.map(|p| SnapshotAgent::new(p, geometry.clone())),
            estimator: ScoreEstimator::new(EstimatorConfig::from_env(env)),
            active: Strategy::Balanced,
            margin,
            switches: 0,
            ema_alpha: None,
            filter: None,
            geometry,
        }
    }

    pub fn from_manifest(manifest: &EnsembleManifest, env: &AirHockeyEnv) -> Result<Self, PolicyError> {
        let ensemble = Self::new(manifest.load_policies()?, manifest.defensive_margin, env);
        match manifest.ema_alpha {
            Some(alpha) => ensemble.with_ema(alpha),
            None => Ok(ensemble),
        }
    }

    /// Smooths the output across strategy switches too.
    pub fn with_ema(mut self, alpha: f64) -> Result<Self, PolicyError> {
        EmaFilterState::new(alpha, [0.0; 2])?;
        self.ema_alpha = Some(alpha);
        Ok(self)
    }

    pub fn active(&self) -> Strategy {
        self.active
    }

    pub fn estimate(&self) -> &ScoreEstimate {
        self.estimator.estimate()
    }

    pub fn switches(&self) -> u32 {
        self.switches
    }
}

impl Agent for EnsemblePolicy {
    fn reset(&mut self) {
        self.estimator.reset();
        self.active = Strategy::Balanced;
        self.switches = 0;
        self.filter = None;
        for p in &mut self.policies {
            p.reset();
        }
    }

    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Action {
        if self.estimator.update(obs).is_some() {
            let next = select_strategy(self.estimator.estimate(), self.margin);
            if next != self.active {
                log::debug!("ensemble switching {} -> {}", self.active, next);
                self.active = next;
                self.switches += 1;
            }
        }
        let raw = self.policies[slot(self.active)].act(obs, rng);
        match self.ema_alpha {
            None => raw,
            Some(alpha) => {
                let g = &self.geometry;
                let filter = self.filter.get_or_insert_with(|| {
                    let start = g.to_action(g.to_meters(obs.own_mallet(0)));
                    EmaFilterState::new(alpha, [start[0].clamp(-1.0, 1.0), start[1].clamp(-1.0, 1.0)])
                        .expect("alpha validated")
                });
                filter.apply(raw)
            }
        }
    }

    fn label(&self) -> String {
        let names: Vec<String> = self.policies.iter().map(|p| p.label()).collect();
        format!("ensemble[{}|margin {}]", names.join(","), self.margin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{layout, OBS_DIM};

    fn config() -> EstimatorConfig {
        EstimatorConfig {
            fault_saturation: 749.0 / 750.0,
            goal_zone_x: 0.75,
            aperture_y: 0.3,
            band_x: 0.32,
            timer_tolerance: 1e-9,
        }
    }

    fn obs(puck: [f64; 2], prev: [f64; 2], timer: f64) -> Observation {
        let mut o = [0.0; OBS_DIM];
        o[layout::PUCK_POSITION.start..][..2].copy_from_slice(&puck);
        o[layout::PUCK_POSITION.start + 2..][..2].copy_from_slice(&prev);
        o[layout::FAULT_TIMER] = timer;
        Observation(o)
    }

    #[test]
    fn rule_table_examples() {
        let est = |own, opp| ScoreEstimate {
            own_goals: own,
            opp_goals: opp,
            ..Default::default()
        };
        assert_eq!(select_strategy(&est(2, 2), 3), Strategy::Balanced);
        assert_eq!(select_strategy(&est(1, 2), 3), Strategy::Aggressive);
        assert_eq!(select_strategy(&est(5, 1), 3), Strategy::Defensive);
        assert_eq!(select_strategy(&est(3, 1), 3), Strategy::Balanced);
    }

    #[test]
    fn goal_into_opponent_goal_counts_for_us() {
        let mut e = ScoreEstimator::new(config());
        assert_eq!(e.update(&obs([0.9, 0.0], [0.85, 0.0], 0.1)), None);
        let cause = e.update(&obs([-0.6, 0.0], [-0.6, 0.0], 0.0));
        assert_eq!(cause, Some(FaceoffCause::OwnGoal));
        assert_eq!(e.estimate().own_points(), 1);
    }

    #[test]
    fn saturated_timer_is_a_fault() {
        let mut e = ScoreEstimator::new(config());
        e.update(&obs([-0.6, 0.0], [-0.6, 0.0], -749.0 / 750.0));
        assert_eq!(e.update(&obs([-0.6, 0.0], [-0.6, 0.0], 0.0)), Some(FaceoffCause::OwnFault));
        e.update(&obs([0.5, 0.1], [0.5, 0.1], 749.0 / 750.0));
        assert_eq!(e.update(&obs([0.6, 0.0], [0.6, 0.0], 0.0)), Some(FaceoffCause::OppFault));
        assert_eq!((e.estimate().own_faults, e.estimate().opp_faults), (1, 1));
    }

    #[test]
    fn no_faceoff_leaves_estimate_unchanged() {
        let mut e = ScoreEstimator::new(config());
        for k in 1..100 {
            let x = -0.5 + 0.01 * k as f64;
            assert_eq!(e.update(&obs([x, 0.0], [x - 0.01, 0.0], -0.001 * k as f64)), None);
        }
        assert_eq!(*e.estimate(), ScoreEstimate::default());
    }

    #[test]
    fn frozen_tracking_before_reset_is_ambiguous() {
        let mut e = ScoreEstimator::new(config());
        e.update(&obs([0.9, 0.0], [0.9, 0.0], 0.2));
        assert_eq!(e.update(&obs([-0.6, 0.0], [-0.6, 0.0], 0.0)), Some(FaceoffCause::Ambiguous));
        let s = e.estimate();
        assert_eq!((s.own_goals, s.opp_goals, s.own_faults, s.opp_faults), (0, 0, 0, 0));
        assert!(s.low_confidence);
    }

    #[test]
    fn slow_puck_in_centre_band_is_a_stuck_reset() {
        let mut e = ScoreEstimator::new(config());
        e.update(&obs([0.1, 0.2], [0.1001, 0.2], 0.06));
        assert_eq!(e.update(&obs([0.6, 0.0], [0.6, 0.0], 0.0)), Some(FaceoffCause::StuckReset));
    }

    #[test]
    fn manifest_rejects_bad_margin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.toml");
        std::fs::write(
            &path,
            "format_version = 1\nbalanced = \"a\"\naggressive = \"b\"\ndefensive = \"c\"\ndefensive_margin = 0\n",
        )
        .unwrap();
        assert!(EnsembleManifest::load(&path).is_err());
        std::fs::write(
            &path,
            "format_version = 1\nbalanced = \"a\"\naggressive = \"b\"\ndefensive = \"c\"\n",
        )
        .unwrap();
        let m = EnsembleManifest::load(&path).unwrap();
        assert_eq!(m.defensive_margin, 3);
        assert_eq!(m.balanced, dir.path().join("a"));
    }
}
