//! Fictitious self-play: the opponent pool, its growth schedule, the stage-2
//! bootstrap and the stage-1 plateau criterion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::bytes_hash;
use crate::env::Strategy;
use crate::policy::{OpponentSource, PolicyError, PolicySnapshot};

pub const POOL_CAPACITY: usize = 25;
pub const ADD_INTERVAL: u64 = 1000;
pub const STAGE2_CHECKPOINTS_PER_STRATEGY: usize = 8;

#[derive(Debug, Error)]
pub enum SelfPlayError {
    #[error("opponent pool is empty")]
    EmptyPool,
    #[error("pool capacity and add interval must be positive")]
    InvalidSettings,
    #[error("{strategy} has {found} checkpoints, stage 2 needs {needed}")]
    InsufficientCheckpoints {
        strategy: Strategy,
        found: usize,
        needed: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct OpponentPool {
    members: Vec<PolicySnapshot>,
    capacity: usize,
    add_interval: u64,
    last_episode: u64,
}

impl OpponentPool {
    pub fn new(initial: Vec<PolicySnapshot>) -> Result<Self, SelfPlayError> {
        Self::with_settings(initial, POOL_CAPACITY, ADD_INTERVAL)
    }

    pub fn with_settings(initial: Vec<PolicySnapshot>, capacity: usize, add_interval: u64) -> Result<Self, SelfPlayError> {
        if capacity == 0 || add_interval == 0 {
            return Err(SelfPlayError::InvalidSettings);
        }
        if initial.is_empty() {
            return Err(SelfPlayError::EmptyPool);
        }
        if initial.len() > capacity {
            return Err(SelfPlayError::Manifest(format!(
                "{} initial members exceed capacity {capacity}",
                initial.len()
            )));
        }
        Ok(Self {
            members: initial,
            capacity,
            add_interval,
            last_episode: 0,
        })
    }

    pub fn members(&self) -> &[PolicySnapshot] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Uniform draw over the current members.
    pub fn sample_opponent(&self, rng: &mut impl Rng) -> Result<PolicySnapshot, SelfPlayError> {
        if self.members.is_empty() {
            return Err(SelfPlayError::EmptyPool);
        }
        Ok(self.members[rng.random_range(0..self.members.len())].clone())
    }

    /// Adds `current` when `episode_index` is a positive multiple of the add
    /// interval. A full pool first loses one uniformly chosen member, which
    /// may be the baseline. Returns whether the pool changed.
    ///
    /// # Panics
    /// Panics if `episode_index` goes backwards.
    pub fn maybe_add(&mut self, current: &PolicySnapshot, episode_index: u64, rng: &mut impl Rng) -> bool {
        assert!(
            episode_index >= self.last_episode,
            "episode index went backwards: {episode_index} < {}",
            self.last_episode
        );
        self.last_episode = episode_index;
        if episode_index == 0 || episode_index % self.add_interval != 0 {
            return false;
        }
        if self.members.len() >= self.capacity {
            let evict = rng.random_range(0..self.members.len());
            self.members.remove(evict);
        }
        self.members.push(current.clone());
        true
    }

    /// Writes one checkpoint file per member into `dir` plus a manifest
    /// listing paths and content hashes.
    pub fn save_manifest(&self, dir: &Path) -> Result<PathBuf, SelfPlayError> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("# air hockey opponent pool\nformat_version 1\n");
        manifest.push_str(&format!("capacity {}\nadd_interval {}\n", self.capacity, self.add_interval));
        for (i, member) in self.members.iter().enumerate() {
            let text = member.to_text();
            let name = format!("member_{i:02}.policy");
            fs::write(dir.join(&name), &text)?;
            manifest.push_str(&format!("member {name} {}\n", bytes_hash(text.as_bytes())));
        }
        let path = dir.join("pool.manifest");
        fs::write(&path, manifest)?;
        Ok(path)
    }

    /// Rebuilds a pool from [`save_manifest`](Self::save_manifest) output,
    /// verifying every member hash.
    pub fn load_manifest(path: &Path) -> Result<Self, SelfPlayError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(path)?;
        let mut capacity = POOL_CAPACITY;
        let mut add_interval = ADD_INTERVAL;
        let mut members = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || SelfPlayError::Manifest(format!("bad line `{line}`"));
            match parts.as_slice() {
                ["format_version", "1"] => {}
                ["format_version", v] => return Err(SelfPlayError::Manifest(format!("unsupported format_version {v}"))),
                ["capacity", v] => capacity = v.parse().map_err(|_| bad())?,
                ["add_interval", v] => add_interval = v.parse().map_err(|_| bad())?,
                ["member", file, hash] => {
                    let body = fs::read_to_string(dir.join(file))?;
                    if bytes_hash(body.as_bytes()) != *hash {
                        return Err(SelfPlayError::Manifest(format!("hash mismatch for {file}")));
                    }
                    members.push(PolicySnapshot::from_text(&body)?);
                }
                _ => return Err(bad()),
            }
        }
        Self::with_settings(members, capacity, add_interval)
    }
}

impl OpponentSource for OpponentPool {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> PolicySnapshot {
        self.sample_opponent(rng).expect("pool is never empty after construction")
    }

    fn on_episode(&mut self, learner: &PolicySnapshot, episode_index: u64, rng: &mut ChaCha8Rng) {
        self.maybe_add(learner, episode_index, rng);
    }
}

/// `count` members of `history` at evenly spaced positions, always including
/// the last one.
pub fn evenly_spaced(history: &[PolicySnapshot], count: usize) -> Vec<PolicySnapshot> {
    if count == 0 || history.is_empty() {
        return Vec::new();
    }
    if history.len() <= count {
        return history.to_vec();
    }
    let last = (history.len() - 1) as f64;
    (1..=count)
        .map(|k| {
            let idx = (k as f64 * last / count as f64).round() as usize;
            history[idx].clone()
        })
        .collect()
}

/// Builds the stage-2 pool: the baseline plus eight checkpoints for each of
/// the three strategies.
pub fn bootstrap_stage2(
    checkpoints: &[(Strategy, Vec<PolicySnapshot>)],
    baseline: PolicySnapshot,
) -> Result<OpponentPool, SelfPlayError> {
    let mut members = vec![baseline];
    for strategy in Strategy::ALL {
        let found: Vec<&PolicySnapshot> = checkpoints
            .iter()
            .filter(|(s, _)| *s == strategy)
            .flat_map(|(_, c)| c)
            .collect();
        if found.len() < STAGE2_CHECKPOINTS_PER_STRATEGY {
            return Err(SelfPlayError::InsufficientCheckpoints {
                strategy,
                found: found.len(),
                needed: STAGE2_CHECKPOINTS_PER_STRATEGY,
            });
        }
        let owned: Vec<PolicySnapshot> = found.into_iter().cloned().collect();
        members.extend(evenly_spaced(&owned, STAGE2_CHECKPOINTS_PER_STRATEGY));
    }
    OpponentPool::new(members)
}

/// Moving-average plateau test on episode returns: the mean of the latest
/// window differs from the mean of the window before it by less than
/// `relative_change` of the earlier mean's magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauCriterion {
    pub window: usize,
    pub relative_change: f64,
    /// Absolute floor on the denominator so returns hovering at zero do not
    /// read as endless change.
    pub min_scale: f64,
}

impl Default for PlateauCriterion {
    fn default() -> Self {
        Self {
            window: 200,
            relative_change: 0.05,
            min_scale: 0.05,
        }
    }
}

impl PlateauCriterion {
    pub fn is_plateau(&self, returns: &[f64]) -> bool {
        let w = self.window;
        if w == 0 || returns.len() < 2 * w {
            return false;
        }
        let n = returns.len();
        let recent = returns[n - w..].iter().sum::<f64>() / w as f64;
        let before = returns[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
        (recent - before).abs() < self.relative_change * before.abs().max(self.min_scale)
    }
}
