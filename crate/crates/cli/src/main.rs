use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use air_hockey::env::{NoiseConfig, Strategy};
use air_hockey::harness::{
    self, HarnessError, MatchOptions, MatchSetup, PolicySpec, TrainingPlan, STEP_BUDGET_MS,
};
use air_hockey::physics::Side;
use air_hockey::selfplay::PlateauCriterion;

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "air-hockey", version, about = "Desk-scale robot air hockey toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SetupArgs {
    /// Table geometry TOML.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Kinematic chain TOML.
    #[arg(long)]
    chain: Option<PathBuf>,
    /// Noise TOML; applies to both sides in matches and to the learner in training.
    #[arg(long)]
    noise: Option<PathBuf>,
}

impl SetupArgs {
    fn load(&self) -> Result<MatchSetup, HarnessError> {
        MatchSetup::from_paths(self.table.as_deref(), self.chain.as_deref(), self.noise.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Play one 15-minute match and write its replay log.
    Match {
        /// Side A policy: scripted:<name>, file:<checkpoint> or ensemble:<manifest>.
        #[arg(long, default_value = "scripted:baseline")]
        a: String,
        #[arg(long, default_value = "scripted:baseline")]
        b: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Play the half-turn image of the match with the same seed.
        #[arg(long)]
        mirrored: bool,
        #[arg(long, default_value_t = STEP_BUDGET_MS)]
        budget_ms: f64,
        #[arg(long, env = "AIR_HOCKEY_OUT_DIR", default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        setup: SetupArgs,
    },
    /// Double round-robin over every ordered pair of policies.
    Tournament {
        /// Two or more policy specs.
        #[arg(long = "policy", required = true, num_args = 1..)]
        policies: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Matches per ordered pair.
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        #[arg(long, env = "AIR_HOCKEY_THREADS", default_value_t = 1)]
        workers: usize,
        #[arg(long, env = "AIR_HOCKEY_OUT_DIR", default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        setup: SetupArgs,
    },
    /// Train toy learners with self-play.
    Train {
        #[arg(long, default_value_t = 1)]
        stage: u8,
        /// Strategies to train in stage 1 (default: all three).
        #[arg(long = "strategy")]
        strategies: Vec<Strategy>,
        /// Episode budget per learner.
        #[arg(long, default_value_t = 20_000)]
        episodes: u64,
        /// Output directory of a finished stage-1 run (stage 2 only).
        #[arg(long)]
        stage1_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "AIR_HOCKEY_THREADS", default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        population_pairs: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Run the whole budget even if returns plateau.
        #[arg(long)]
        no_plateau: bool,
        #[arg(long, env = "AIR_HOCKEY_OUT_DIR", default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        setup: SetupArgs,
    },
    /// Re-simulate a replay log and check it reproduces byte for byte.
    ReplayVerify {
        replay: PathBuf,
        #[command(flatten)]
        setup: SetupArgs,
    },
    /// Time environment steps.
    Bench {
        #[arg(long, default_value_t = 45_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        setup: SetupArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<HarnessError>() {
                Some(HarnessError::Verification(_)) => EXIT_VERIFY,
                Some(e) if e.is_config_error() => EXIT_CONFIG,
                Some(_) => 1,
                None => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

fn parse_spec(s: &str) -> Result<PolicySpec, HarnessError> {
    s.parse()
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Match {
            a,
            b,
            seed,
            mirrored,
            budget_ms,
            out,
            setup,
        } => {
            let setup = setup.load()?;
            let (a, b) = (parse_spec(&a)?, parse_spec(&b)?);
            let options = MatchOptions {
                mirrored,
                step_budget_ms: budget_ms,
            };
            let record = harness::run_match(&setup, &a, &b, seed, &options)?;
            let dir = out.join(format!("match_{seed}{}", if mirrored { "_mirrored" } else { "" }));
            setup.write_snapshot(&dir.join("config"))?;
            write(&dir.join("replay.log"), &record.replay.to_text())?;
            let r = &record.result;
            let summary = format!(
                "{a} vs {b}\nscore {} : {}\ngoals {} : {}\nfaults {} : {}\ndecision p99 {:.1} us : {:.1} us\n",
                r.points[0], r.points[1], r.goals[0], r.goals[1], r.faults[0], r.faults[1], record.latency[0].p99_us, record.latency[1].p99_us
            );
            write(&dir.join("result.txt"), &summary)?;
            print!("{summary}");
            println!("replay written to {}", dir.join("replay.log").display());
        }
        Command::Tournament {
            policies,
            seed,
            rounds,
            workers,
            out,
            setup,
        } => {
            let setup = setup.load()?;
            let specs = policies.iter().map(|s| parse_spec(s)).collect::<Result<Vec<_>, _>>()?;
            let table = harness::run_tournament(&setup, &specs, seed, rounds, workers)?;
            let dir = out.join(format!("tournament_{seed}"));
            setup.write_snapshot(&dir.join("config"))?;
            let mut csv = String::from("a,b,round,seed,points_a,points_b,goals_a,goals_b,faults_a,faults_b\n");
            for e in &table.entries {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    e.a, e.b, e.round, e.seed, e.points[0], e.points[1], e.goals[0], e.goals[1], e.faults[0], e.faults[1]
                ));
            }
            write(&dir.join("matches.csv"), &csv)?;
            write(&dir.join("table.txt"), &table.to_string())?;
            print!("{table}");
        }
        Command::Train {
            stage,
            strategies,
            episodes,
            stage1_dir,
            seed,
            workers,
            hidden,
            population_pairs,
            sigma,
            learning_rate,
            checkpoint_every,
            no_plateau,
            out,
            setup: setup_args,
        } => {
            let setup = setup_args.load()?;
            let dir = out.join(format!("train_stage{stage}_{seed}"));
            let mut plan = match stage {
                2 => {
                    let s1 = stage1_dir.context("stage 2 needs --stage1-dir")?;
                    TrainingPlan::stage2(dir, s1, episodes, seed)
                }
                _ => TrainingPlan::stage1(dir, episodes, seed),
            };
            plan.stage = stage;
            if !strategies.is_empty() {
                plan.strategies = strategies;
            }
            if let Some(p) = &setup_args.noise {
                plan.noise = NoiseConfig::load(p)?;
            }
            plan.workers = workers;
            if let Some(h) = hidden {
                plan.train.hidden = h;
            }
            if let Some(p) = population_pairs {
                plan.train.population_pairs = p;
            }
            if let Some(s) = sigma {
                plan.train.sigma = s;
            }
            if let Some(lr) = learning_rate {
                plan.train.learning_rate = lr;
            }
            if let Some(c) = checkpoint_every {
                plan.train.checkpoint_every = c;
            }
            if no_plateau {
                plan.plateau = None;
            } else if plan.stage == 1 && plan.plateau.is_none() {
                plan.plateau = Some(PlateauCriterion::default());
            }
            let output = harness::run_training(&setup, &plan)?;
            for (strategy, paths) in &output.histories {
                println!(
                    "{strategy}: {} checkpoints, latest {}",
                    paths.len(),
                    paths.last().map_or("-".into(), |p| p.display().to_string())
                );
            }
            if let Some(m) = &output.pool_manifest {
                println!("initial pool manifest {}", m.display());
            }
        }
        Command::ReplayVerify { replay, setup } => {
            let setup = setup.load()?;
            let text = fs::read_to_string(&replay).with_context(|| format!("reading {}", replay.display()))?;
            let record = harness::verify_replay(&text, &setup)?;
            let r = &record.result;
            println!(
                "replay verified: {} events, score {} : {} ({} vs {})",
                record.replay.events.len(),
                r.points[Side::A.index()],
                r.points[Side::B.index()],
                record.replay.header.policies[0],
                record.replay.header.policies[1]
            );
        }
        Command::Bench { steps, seed, setup } => {
            let setup = setup.load()?;
            let report = harness::bench(&setup, steps, seed)?;
            println!("{report}");
        }
    }
    Ok(())
}
