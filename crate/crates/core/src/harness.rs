//! Match and tournament runners, replay logs, training orchestration and
//! benchmarking.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{self, bytes_hash, config_hash, ConfigError, FORMAT_VERSION};
use crate::ensemble::{EnsembleManifest, EnsemblePolicy};
use crate::env::{AirHockeyEnv, EnvConfig, EnvError, EnvMode, NoiseConfig, Strategy};
use crate::kinematics::KinematicChain;
use crate::physics::{Side, TableSpec};
use crate::policy::{
    train_toy_learner, Agent, PolicyError, PolicyGeometry, PolicySnapshot, SnapshotAgent, TrainConfig,
};
use crate::rules::{score_match, MatchEvent, MatchResult, RulesError};
use crate::selfplay::{bootstrap_stage2, OpponentPool, PlateauCriterion, SelfPlayError, ADD_INTERVAL, POOL_CAPACITY};

const REPLAY_MAGIC: &str = "AIRHOCKEY-REPLAY";
const HISTORY_FILE: &str = "history.manifest";

/// Per-agent decision budget of one control cycle.
pub const STEP_BUDGET_MS: f64 = 20.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    SelfPlay(#[from] SelfPlayError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error("{0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("replay verification failed: {0}")]
    Verification(String),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl HarnessError {
    /// Errors caused by bad inputs rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        !matches!(
            self,
            HarnessError::Verification(_) | HarnessError::Env(_) | HarnessError::Rules(_) | HarnessError::Threads(_)
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Deterministic 64-bit seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))?;
    Ok(pool.install(f))
}

/// Table, arm and environment settings shared by every match of a run.
#[derive(Debug, Clone)]
pub struct MatchSetup {
    pub table: TableSpec,
    pub chain: KinematicChain,
    pub env: EnvConfig,
}

impl Default for MatchSetup {
    fn default() -> Self {
        Self {
            table: TableSpec::default(),
            chain: KinematicChain::iiwa14_approx(),
            env: EnvConfig::evaluation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupHashes {
    pub table: String,
    pub chain: String,
    pub env: String,
}

impl MatchSetup {
    /// Defaults for anything not given. A noise file applies to both sides.
    pub fn from_paths(table: Option<&Path>, chain: Option<&Path>, noise: Option<&Path>) -> Result<Self, HarnessError> {
        let mut setup = Self::default();
        if let Some(p) = table {
            setup.table = TableSpec::load(p)?;
        }
        if let Some(p) = chain {
            setup.chain = KinematicChain::load(p)?;
        }
        if let Some(p) = noise {
            setup.env.noise = NoiseConfig::load(p)?;
            setup.env.noisy_sides = [true, true];
        }
        Ok(setup)
    }

    pub fn hashes(&self) -> SetupHashes {
        SetupHashes {
            table: config_hash(&self.table),
            chain: config_hash(self.chain.spec()),
            env: config_hash(&self.env),
        }
    }

    /// A match-mode environment for this setup.
    pub fn build_env(&self) -> Result<AirHockeyEnv, HarnessError> {
        let mut env = self.env.clone();
        env.mode = EnvMode::Match;
        Ok(AirHockeyEnv::new(self.table.clone(), self.chain.clone(), env)?)
    }

    /// Writes `table.toml`, `chain.toml` and `env.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        config::save(&self.table, &dir.join("table.toml"))?;
        config::save(self.chain.spec(), &dir.join("chain.toml"))?;
        fs::write(dir.join("env.toml"), config::to_toml_string(&self.env)?).map_err(io_err(dir))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScriptedName {
    Baseline,
    PassiveBlocker,
    RandomJitterer,
    Idle,
}

impl ScriptedName {
    pub fn snapshot(self) -> PolicySnapshot {
        match self {
            ScriptedName::Baseline => PolicySnapshot::scripted_baseline(),
            ScriptedName::PassiveBlocker => PolicySnapshot::passive_blocker(),
            ScriptedName::RandomJitterer => PolicySnapshot::random_jitterer(),
            ScriptedName::Idle => PolicySnapshot::idle(),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ScriptedName::Baseline => "baseline",
            ScriptedName::PassiveBlocker => "passive_blocker",
            ScriptedName::RandomJitterer => "random_jitterer",
            ScriptedName::Idle => "idle",
        }
    }
}

/// Where an agent comes from: `scripted:<name>`, `file:<checkpoint>` or
/// `ensemble:<manifest>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PolicySpec {
    Scripted(ScriptedName),
    File(PathBuf),
    Ensemble(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| HarnessError::Spec(format!("policy `{s}` must look like kind:value")))?;
        Ok(match kind {
            "scripted" => PolicySpec::Scripted(match rest {
                "baseline" => ScriptedName::Baseline,
                "passive_blocker" => ScriptedName::PassiveBlocker,
                "random_jitterer" => ScriptedName::RandomJitterer,
                "idle" => ScriptedName::Idle,
                _ => return Err(HarnessError::Spec(format!("unknown scripted policy `{rest}`"))),
            }),
            "file" if !rest.is_empty() => PolicySpec::File(PathBuf::from(rest)),
            "ensemble" if !rest.is_empty() => PolicySpec::Ensemble(PathBuf::from(rest)),
            _ => return Err(HarnessError::Spec(format!("unknown policy spec `{s}`"))),
        })
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Scripted(n) => write!(f, "scripted:{}", n.as_str()),
            PolicySpec::File(p) => write!(f, "file:{}", p.display()),
            PolicySpec::Ensemble(p) => write!(f, "ensemble:{}", p.display()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, HarnessError> {
    fs::read(path).map_err(io_err(path))
}

impl PolicySpec {
    /// The spec plus a content hash of every file it reads.
    pub fn identity(&self) -> Result<String, HarnessError> {
        Ok(match self {
            PolicySpec::Scripted(_) => self.to_string(),
            PolicySpec::File(p) => format!("{self}#{}", bytes_hash(&read(p)?)),
            PolicySpec::Ensemble(p) => {
                let manifest = EnsembleManifest::load(p)?;
                let mut bytes = read(p)?;
                for file in [&manifest.balanced, &manifest.aggressive, &manifest.defensive] {
                    bytes.extend(read(file)?);
                }
                format!("{self}#{}", bytes_hash(&bytes))
            }
        })
    }

    pub fn build_agent(&self, env: &AirHockeyEnv) -> Result<Box<dyn Agent>, HarnessError> {
        let geometry = PolicyGeometry::from_env(env);
        Ok(match self {
            PolicySpec::Scripted(n) => Box::new(SnapshotAgent::new(n.snapshot(), geometry)),
            PolicySpec::File(p) => Box::new(SnapshotAgent::new(PolicySnapshot::load(p)?, geometry)),
            PolicySpec::Ensemble(p) => {
                let manifest = EnsembleManifest::load(p)?;
                Box::new(EnsemblePolicy::from_manifest(&manifest, env)?)
            }
        })
    }
}

/// Per-step decision latency of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyStats {
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    /// Steps slower than the budget.
    pub over_budget: u64,
}

impl LatencyStats {
    pub fn from_samples(samples: &mut [Duration], budget_ms: f64) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let at = |q: f64| {
            let idx = ((samples.len() - 1) as f64 * q).round() as usize;
            samples[idx].as_secs_f64() * 1e6
        };
        let budget = Duration::from_secs_f64(budget_ms / 1e3);
        Self {
            p50_us: at(0.5),
            p99_us: at(0.99),
            max_us: at(1.0),
            over_budget: samples.iter().filter(|d| **d > budget).count() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayHeader {
    pub seed: u64,
    pub mirrored: bool,
    pub hashes: SetupHashes,
    /// Policy identities (spec plus content hash) for sides A and B.
    pub policies: [String; 2],
    pub steps: u32,
}

/// Everything needed to re-simulate a match and check its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub header: ReplayHeader,
    pub events: Vec<MatchEvent>,
}

impl Replay {
    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "magic {REPLAY_MAGIC}\nformat_version {FORMAT_VERSION}\nseed {}\nmirrored {}\ntable_hash {}\nchain_hash {}\nenv_hash {}\npolicy_a {}\npolicy_b {}\nsteps {}\nevents {}\n",
            h.seed,
            h.mirrored,
            h.hashes.table,
            h.hashes.chain,
            h.hashes.env,
            h.policies[0],
            h.policies[1],
            h.steps,
            self.events.len()
        );
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let bad = |m: &str| HarnessError::Verification(format!("malformed replay: {m}"));
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<String, HarnessError> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}`")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == name => Ok(v.to_string()),
                _ => Err(bad(&format!("expected `{name}`, found `{line}`"))),
            }
        };
        if field("magic")? != REPLAY_MAGIC {
            return Err(bad("magic"));
        }
        if field("format_version")? != FORMAT_VERSION.to_string() {
            return Err(bad("unsupported format_version"));
        }
        let seed = field("seed")?.parse().map_err(|_| bad("seed"))?;
        let mirrored = field("mirrored")?.parse().map_err(|_| bad("mirrored"))?;
        let hashes = SetupHashes {
            table: field("table_hash")?,
            chain: field("chain_hash")?,
            env: field("env_hash")?,
        };
        let policies = [field("policy_a")?, field("policy_b")?];
        let steps = field("steps")?.parse().map_err(|_| bad("steps"))?;
        let count: usize = field("events")?.parse().map_err(|_| bad("events"))?;
        let events = lines
            .map(|l| l.parse::<MatchEvent>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        if events.len() != count {
            return Err(bad(&format!("expected {count} events, found {}", events.len())));
        }
        Ok(Self {
            header: ReplayHeader {
                seed,
                mirrored,
                hashes,
                policies,
                steps,
            },
            events,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOptions {
    /// Play the half-turn image of the unmirrored match with the same seed.
    pub mirrored: bool,
    pub step_budget_ms: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            mirrored: false,
            step_budget_ms: STEP_BUDGET_MS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchRecord {
    pub result: MatchResult,
    pub replay: Replay,
    /// Decision latency of the agents on sides A and B.
    pub latency: [LatencyStats; 2],
}

/// Plays one full match between two policy specs.
pub fn run_match(
    setup: &MatchSetup,
    a: &PolicySpec,
    b: &PolicySpec,
    seed: u64,
    options: &MatchOptions,
) -> Result<MatchRecord, HarnessError> {
    let env = setup.build_env()?;
    let agents = [a.build_agent(&env)?, b.build_agent(&env)?];
    let identities = [a.identity()?, b.identity()?];
    play_match(setup, env, agents, identities, seed, options)
}

/// Plays one full match between already-built agents.
pub fn play_match(
    setup: &MatchSetup,
    mut env: AirHockeyEnv,
    mut agents: [Box<dyn Agent>; 2],
    identities: [String; 2],
    seed: u64,
    options: &MatchOptions,
) -> Result<MatchRecord, HarnessError> {
    let mut rngs = [
        ChaCha8Rng::seed_from_u64(derive_seed(seed, "agent-a")),
        ChaCha8Rng::seed_from_u64(derive_seed(seed, "agent-b")),
    ];
    if options.mirrored {
        rngs.swap(0, 1);
    }
    for agent in &mut agents {
        agent.reset();
    }
    let steps = env.config().rules.match_steps;
    let mut latency: [Vec<Duration>; 2] = [Vec::with_capacity(steps as usize), Vec::with_capacity(steps as usize)];
    let mut obs = env.reset_with(seed, options.mirrored)?;
    let mut events = Vec::new();
    loop {
        let mut actions = [[0.0; 2]; 2];
        for side in Side::BOTH {
            let i = side.index();
            let start = Instant::now();
            actions[i] = agents[i].act(&obs[i], &mut rngs[i]);
            latency[i].push(start.elapsed());
        }
        let step = env.step(actions)?;
        events.extend(step.events);
        obs = step.observations;
        if step.match_over {
            break;
        }
    }
    let result = score_match(&events)?;
    let latency = [
        LatencyStats::from_samples(&mut latency[0], options.step_budget_ms),
        LatencyStats::from_samples(&mut latency[1], options.step_budget_ms),
    ];
    for (side, l) in Side::BOTH.iter().zip(&latency) {
        if l.p99_us > options.step_budget_ms * 1e3 {
            log::warn!(
                "side {}: p99 decision latency {:.0} us exceeds the {} ms budget",
                side.as_str(),
                l.p99_us,
                options.step_budget_ms
            );
        }
    }
    Ok(MatchRecord {
        result,
        replay: Replay {
            header: ReplayHeader {
                seed,
                mirrored: options.mirrored,
                hashes: setup.hashes(),
                policies: identities,
                steps,
            },
            events,
        },
        latency,
    })
}

fn split_identity(identity: &str) -> Result<PolicySpec, HarnessError> {
    let spec = identity.rsplit_once('#').map_or(identity, |(s, _)| s);
    spec.parse()
}

/// Re-simulates a replay under `setup` and checks that the log comes out
/// byte-identical.
pub fn verify_replay(replay_text: &str, setup: &MatchSetup) -> Result<MatchRecord, HarnessError> {
    let replay = Replay::from_text(replay_text)?;
    let h = &replay.header;
    let ours = setup.hashes();
    for (name, theirs, mine) in [
        ("table", &h.hashes.table, &ours.table),
        ("chain", &h.hashes.chain, &ours.chain),
        ("env", &h.hashes.env, &ours.env),
    ] {
        if theirs != mine {
            return Err(HarnessError::Verification(format!(
                "{name} config hash {mine} differs from the recorded {theirs}"
            )));
        }
    }
    let mut specs = Vec::with_capacity(2);
    for recorded in &h.policies {
        let spec = split_identity(recorded)?;
        let now = spec.identity()?;
        if &now != recorded {
            return Err(HarnessError::Verification(format!("policy {recorded} now reads as {now}")));
        }
        specs.push(spec);
    }
    if setup.env.rules.match_steps != h.steps {
        return Err(HarnessError::Verification(format!(
            "match length {} differs from the recorded {}",
            setup.env.rules.match_steps, h.steps
        )));
    }
    let options = MatchOptions {
        mirrored: h.mirrored,
        ..MatchOptions::default()
    };
    let record = run_match(setup, &specs[0], &specs[1], h.seed, &options)?;
    let again = record.replay.to_text();
    if again != replay_text {
        let line = again
            .lines()
            .zip(replay_text.lines())
            .position(|(x, y)| x != y)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        return Err(HarnessError::Verification(format!("re-simulated log differs at {line}")));
    }
    Ok(record)
}

/// One match of a tournament.
#[derive(Debug, Clone, PartialEq)]
pub struct TournamentEntry {
    pub a: String,
    pub b: String,
    pub round: u32,
    pub seed: u64,
    pub goals: [u32; 2],
    pub faults: [u32; 2],
    pub points: [i64; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Standing {
    pub policy: String,
    pub matches: u32,
    pub wins: u32,
    pub draws: u32,
    pub losses: u32,
    pub points_for: i64,
    pub points_against: i64,
}

impl Standing {
    /// Three per win, one per draw.
    pub fn table_points(&self) -> u32 {
        3 * self.wins + self.draws
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TournamentTable {
    pub entries: Vec<TournamentEntry>,
    pub standings: Vec<Standing>,
}

impl TournamentTable {
    /// Mean points of `a` and `b` over all their meetings, in both seatings.
    pub fn average_score(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        let mut n = 0.0;
        let (mut pa, mut pb) = (0.0, 0.0);
        for e in &self.entries {
            if e.a == a && e.b == b {
                pa += e.points[0] as f64;
                pb += e.points[1] as f64;
                n += 1.0;
            } else if e.a == b && e.b == a {
                pa += e.points[1] as f64;
                pb += e.points[0] as f64;
                n += 1.0;
            }
        }
        (n > 0.0).then(|| (pa / n, pb / n))
    }
}

impl fmt::Display for TournamentTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<4} {:<48} {:>3} {:>3} {:>3} {:>3} {:>6} {:>6} {:>4}", "rank", "policy", "P", "W", "D", "L", "PF", "PA", "Pts")?;
        for (i, s) in self.standings.iter().enumerate() {
            writeln!(
                f,
                "{:<4} {:<48} {:>3} {:>3} {:>3} {:>3} {:>6} {:>6} {:>4}",
                i + 1,
                s.policy,
                s.matches,
                s.wins,
                s.draws,
                s.losses,
                s.points_for,
                s.points_against,
                s.table_points()
            )?;
        }
        writeln!(f)?;
        for (i, x) in self.standings.iter().enumerate() {
            for y in &self.standings[i + 1..] {
                if let Some((sx, sy)) = self.average_score(&x.policy, &y.policy) {
                    writeln!(f, "{} vs {}: average score {sx:.1} : {sy:.1}", x.policy, y.policy)?;
                }
            }
        }
        Ok(())
    }
}

/// Double round-robin: every ordered pair of distinct policies plays
/// `rounds` matches. Match seeds depend on the policies rather than their
/// listing position, so the table does not depend on the order of `specs`.
pub fn run_tournament(
    setup: &MatchSetup,
    specs: &[PolicySpec],
    seed: u64,
    rounds: u32,
    workers: usize,
) -> Result<TournamentTable, HarnessError> {
    if specs.len() < 2 {
        return Err(HarnessError::Spec("a tournament needs at least two policies".into()));
    }
    let ids: Vec<String> = specs.iter().map(PolicySpec::identity).collect::<Result<_, _>>()?;
    let mut fixtures = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for (j, b) in ids.iter().enumerate() {
            if i != j {
                for round in 0..rounds.max(1) {
                    fixtures.push((i, j, round, derive_seed(seed, &format!("{a}|{b}|{round}"))));
                }
            }
        }
    }
    let results: Vec<Result<TournamentEntry, HarnessError>> = with_workers(workers, || {
        fixtures
            .par_iter()
            .map(|&(i, j, round, match_seed)| {
                let record = run_match(setup, &specs[i], &specs[j], match_seed, &MatchOptions::default())?;
                Ok(TournamentEntry {
                    a: ids[i].clone(),
                    b: ids[j].clone(),
                    round,
                    seed: match_seed,
                    goals: record.result.goals,
                    faults: record.result.faults,
                    points: record.result.points,
                })
            })
            .collect()
    })?;
    let mut entries: Vec<TournamentEntry> = results.into_iter().collect::<Result<_, _>>()?;
    entries.sort_by(|x, y| (&x.a, &x.b, x.round).cmp(&(&y.a, &y.b, y.round)));

    let mut standings: Vec<Standing> = Vec::new();
    for e in &entries {
        for (me, mine, theirs) in [(&e.a, e.points[0], e.points[1]), (&e.b, e.points[1], e.points[0])] {
            let pos = match standings.iter().position(|s| &s.policy == me) {
                Some(p) => p,
                None => {
                    standings.push(Standing {
                        policy: me.clone(),
                        ..Default::default()
                    });
                    standings.len() - 1
                }
            };
            let s = &mut standings[pos];
            s.matches += 1;
            s.points_for += mine;
            s.points_against += theirs;
            match mine.cmp(&theirs) {
                std::cmp::Ordering::Greater => s.wins += 1,
                std::cmp::Ordering::Equal => s.draws += 1,
                std::cmp::Ordering::Less => s.losses += 1,
            }
        }
    }
    standings.sort_by(|x, y| {
        y.table_points()
            .cmp(&x.table_points())
            .then((y.points_for - y.points_against).cmp(&(x.points_for - x.points_against)))
            .then(x.policy.cmp(&y.policy))
    });
    Ok(TournamentTable { entries, standings })
}

/// Settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainingPlan {
    pub stage: u8,
    /// Stage 1 trains one learner per listed strategy; stage 2 trains the
    /// first listed strategy (balanced by default).
    pub strategies: Vec<Strategy>,
    pub budget_episodes: u64,
    pub train: TrainConfig,
    pub plateau: Option<PlateauCriterion>,
    pub pool_capacity: usize,
    pub add_interval: u64,
    /// Learner-side noise during training.
    pub noise: NoiseConfig,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Output directory of a finished stage-1 run; required for stage 2.
    pub stage1_dir: Option<PathBuf>,
}

impl TrainingPlan {
    pub fn stage1(out_dir: PathBuf, budget_episodes: u64, seed: u64) -> Self {
        Self {
            stage: 1,
            strategies: Strategy::ALL.to_vec(),
            budget_episodes,
            train: TrainConfig::default(),
            plateau: Some(PlateauCriterion::default()),
            pool_capacity: POOL_CAPACITY,
            add_interval: ADD_INTERVAL,
            noise: NoiseConfig::default(),
            seed,
            workers: 1,
            out_dir,
            stage1_dir: None,
        }
    }

    pub fn stage2(out_dir: PathBuf, stage1_dir: PathBuf, budget_episodes: u64, seed: u64) -> Self {
        Self {
            stage: 2,
            strategies: vec![Strategy::Balanced],
            plateau: None,
            stage1_dir: Some(stage1_dir),
            ..Self::stage1(out_dir, budget_episodes, seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutput {
    pub dir: PathBuf,
    /// Checkpoint files per trained strategy, oldest first.
    pub histories: Vec<(Strategy, Vec<PathBuf>)>,
    pub pool_manifest: Option<PathBuf>,
}

fn strategy_dir(root: &Path, stage: u8, strategy: Strategy) -> PathBuf {
    root.join(format!("stage{stage}")).join(strategy.as_str())
}

/// Writes checkpoints, a hash manifest and the learning curve for one run.
fn write_history(dir: &Path, run: &crate::policy::TrainingRun) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("# checkpoint history, oldest first\nformat_version 1\n");
    let mut paths = Vec::new();
    for snap in &run.checkpoints {
        let name = format!("ckpt_{:09}.policy", snap.metadata().episode);
        let text = snap.to_text();
        let path = dir.join(&name);
        fs::write(&path, &text).map_err(io_err(&path))?;
        manifest.push_str(&format!("checkpoint {name} {}\n", bytes_hash(text.as_bytes())));
        paths.push(path);
    }
    let mpath = dir.join(HISTORY_FILE);
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    let mut curve = String::from("generation,mean_return\n");
    for (g, r) in run.generation_returns.iter().enumerate() {
        curve.push_str(&format!("{g},{r}\n"));
    }
    let cpath = dir.join("curve.csv");
    fs::write(&cpath, curve).map_err(io_err(&cpath))?;
    Ok(paths)
}

/// Loads a checkpoint history written by a training run, checking hashes.
pub fn load_history(dir: &Path) -> Result<Vec<PolicySnapshot>, HarnessError> {
    let mpath = dir.join(HISTORY_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["format_version", "1"] => {}
            ["checkpoint", name, hash] => {
                let path = dir.join(name);
                let body = fs::read_to_string(&path).map_err(io_err(&path))?;
                if bytes_hash(body.as_bytes()) != *hash {
                    return Err(HarnessError::Spec(format!("{} does not match its recorded hash", path.display())));
                }
                out.push(PolicySnapshot::from_text(&body)?);
            }
            _ => return Err(HarnessError::Spec(format!("bad line `{line}` in {}", mpath.display()))),
        }
    }
    Ok(out)
}

/// Runs stage 1 (one self-play learner per strategy, pool seeded with the
/// scripted baseline) or stage 2 (a fresh learner against the bootstrapped
/// pool) and writes every artefact under `plan.out_dir`.
pub fn run_training(setup: &MatchSetup, plan: &TrainingPlan) -> Result<TrainingOutput, HarnessError> {
    let mut env_config = EnvConfig::training(plan.noise.clone());
    env_config.rules = setup.env.rules.clone();
    let env = AirHockeyEnv::new(setup.table.clone(), setup.chain.clone(), env_config)?;
    fs::create_dir_all(&plan.out_dir).map_err(io_err(&plan.out_dir))?;
    setup.write_snapshot(&plan.out_dir.join("config"))?;
    let stop = plan.plateau.map(|c| move |r: &[f64]| c.is_plateau(r));
    let stop_ref = stop.as_ref().map(|f| f as &(dyn Fn(&[f64]) -> bool + Sync));

    let mut output = TrainingOutput {
        dir: plan.out_dir.clone(),
        histories: Vec::new(),
        pool_manifest: None,
    };
    match plan.stage {
        1 => {
            for &strategy in &plan.strategies {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, strategy.as_str()));
                let mut pool = OpponentPool::with_settings(
                    vec![PolicySnapshot::scripted_baseline()],
                    plan.pool_capacity,
                    plan.add_interval,
                )?;
                log::info!("stage 1: training {strategy} for up to {} episodes", plan.budget_episodes);
                let run = with_workers(plan.workers, || {
                    train_toy_learner(&env, &mut pool, strategy, plan.budget_episodes, &plan.train, stop_ref, &mut rng)
                })??;
                let dir = strategy_dir(&plan.out_dir, 1, strategy);
                output.histories.push((strategy, write_history(&dir, &run)?));
                pool.save_manifest(&dir.join("pool"))?;
            }
        }
        2 => {
            let stage1 = plan
                .stage1_dir
                .as_ref()
                .ok_or_else(|| HarnessError::Spec("stage 2 needs the stage-1 output directory".into()))?;
            let mut sets = Vec::new();
            for strategy in Strategy::ALL {
                let dir = strategy_dir(stage1, 1, strategy);
                if !dir.join(HISTORY_FILE).exists() {
                    return Err(HarnessError::Spec(format!(
                        "missing stage-1 checkpoints for {strategy} in {}",
                        dir.display()
                    )));
                }
                // The untrained initial snapshot is not a useful opponent.
                let history: Vec<PolicySnapshot> =
                    load_history(&dir)?.into_iter().filter(|s| s.metadata().episode > 0).collect();
                sets.push((strategy, history));
            }
            let mut pool = bootstrap_stage2(&sets, PolicySnapshot::scripted_baseline())?;
            let strategy = plan.strategies.first().copied().unwrap_or(Strategy::Balanced);
            let dir = strategy_dir(&plan.out_dir, 2, strategy);
            output.pool_manifest = Some(pool.save_manifest(&dir.join("initial_pool"))?);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "stage2"));
            log::info!("stage 2: training {strategy} against a pool of {}", pool.len());
            let run = with_workers(plan.workers, || {
                train_toy_learner(&env, &mut pool, strategy, plan.budget_episodes, &plan.train, stop_ref, &mut rng)
            })??;
            output.histories.push((strategy, write_history(&dir, &run)?));
        }
        s => return Err(HarnessError::Spec(format!("training stage must be 1 or 2, got {s}"))),
    }
    Ok(output)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub steps: u64,
    pub elapsed_s: f64,
    pub steps_per_s: f64,
    /// Environment step latency (physics, rules, observations).
    pub env_step: LatencyStats,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} steps in {:.2} s ({:.0} steps/s); env step p50 {:.1} us, p99 {:.1} us, max {:.1} us",
            self.steps, self.elapsed_s, self.steps_per_s, self.env_step.p50_us, self.env_step.p99_us, self.env_step.max_us
        )
    }
}

/// Times `steps` environment steps of the scripted baseline against itself.
pub fn bench(setup: &MatchSetup, steps: u64, seed: u64) -> Result<BenchReport, HarnessError> {
    let mut env = setup.build_env()?;
    let geometry = PolicyGeometry::from_env(&env);
    let policy = PolicySnapshot::scripted_baseline();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(seed)?;
    let mut samples = Vec::with_capacity(steps as usize);
    let start = Instant::now();
    for _ in 0..steps {
        let a = policy.act(obs[0].as_slice(), &geometry, &mut rng)?;
        let b = policy.act(obs[1].as_slice(), &geometry, &mut rng)?;
        let t = Instant::now();
        let step = env.step([a, b])?;
        samples.push(t.elapsed());
        obs = if step.match_over { env.reset(seed.wrapping_add(1))? } else { step.observations };
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        steps,
        elapsed_s: elapsed,
        steps_per_s: steps as f64 / elapsed.max(1e-12),
        env_step: LatencyStats::from_samples(&mut samples, STEP_BUDGET_MS),
    })
}
