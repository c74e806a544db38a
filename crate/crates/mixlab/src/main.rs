//! Command-line front end: generate traces and event logs, run the
//! disclosure attacks against them, and sweep experiment grids.
//!
//! All randomness flows from the explicit `--seed` / `--master-seed` flags;
//! identical invocations on identical inputs produce byte-identical outputs.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mixlab::attacks::{
    self, evaluate_success, required_observations, AttackError, AttackKind, AttackOutcome,
    AttackParams,
};
use mixlab::core::{BackgroundModel, Defense, GroundTruth, SystemConfig, UserId};
use mixlab::harness;
use mixlab::roundsim::generate_trace;
use mixlab::sgmix::{simulate_sgmix, virtualize_rounds_with, VirtualizeParams};

#[derive(Parser)]
#[command(
    name = "mixlab",
    version,
    about = "Mix-network traffic-analysis laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    Standard,
    Improved,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Standard => AttackKind::Standard,
            AttackArg::Improved => AttackKind::Improved,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DefenseArg {
    None,
    Sybil,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a threshold-mix trace as JSONL
    Simulate(SimulateArgs),
    /// Run a disclosure attack against a trace or an event log
    Attack(AttackArgs),
    /// Generate a stop-and-go mix event log as JSONL
    Sgmix(SgmixArgs),
    /// Run an experiment grid and write result CSVs
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of users, N
    #[arg(long)]
    n: u32,
    /// Batch size, b
    #[arg(long)]
    b: u32,
    /// Target partner count, m
    #[arg(long)]
    m: u32,
    /// Number of rounds to generate
    #[arg(long)]
    rounds: u64,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generation-side defense
    #[arg(long, value_enum, default_value_t = DefenseArg::None)]
    defense: DefenseArg,
    /// Number of pseudonyms under the sybil defense
    #[arg(long, default_value_t = 1)]
    pseudonyms: u32,
    /// Pseudonym partner count m' (defaults to m)
    #[arg(long)]
    pseudonym_partners: Option<u32>,
    /// Force the target into each round with this probability
    #[arg(long)]
    target_rate: Option<f64>,
    /// Partner count of non-target users (defaults to m)
    #[arg(long)]
    background_partners: Option<u32>,
    /// Let non-target users send uniformly to everyone instead of to fixed
    /// partner sets
    #[arg(long)]
    uniform_background: bool,
    /// Draw non-uniform recipient weights
    #[arg(long)]
    weighted: bool,
    /// Output trace path (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Also write the hidden ground truth (JSON) for later evaluation
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Input trace (JSONL, threshold-mix rounds)
    #[arg(long, conflicts_with = "event_log")]
    trace: Option<PathBuf>,
    /// Input event log (JSONL, stop-and-go mix); rounds are windowed out of
    /// it before attacking
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Observation horizon of the event log (required with --event-log)
    #[arg(long)]
    horizon: Option<f64>,
    /// Confidence parameter for the delay bound used in windowing
    #[arg(long, default_value_t = 3.0)]
    k: f64,
    /// Target user id (defaults to the one in --truth)
    #[arg(long)]
    target: Option<u32>,
    /// Which attack to run
    #[arg(long, value_enum)]
    attack: AttackArg,
    /// Number of users (defaults to the value in --truth)
    #[arg(long)]
    n: Option<u32>,
    /// Batch size the attacker assumes (defaults to the value in --truth)
    #[arg(long)]
    b: Option<u32>,
    /// How many candidate partners to rank (defaults to the value in --truth)
    #[arg(long)]
    m: Option<u32>,
    /// Observation budget
    #[arg(long, default_value_t = 5000)]
    obs_limit: u32,
    /// Fraction of true partners required for success
    #[arg(long, default_value_t = 0.8)]
    success_fraction: f64,
    /// Ground-truth file written by simulate/sgmix; enables the success
    /// report
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SgmixArgs {
    /// Arrival rate (messages per second)
    #[arg(long)]
    lambda: f64,
    /// Service rate of the exponential delay
    #[arg(long)]
    mu: f64,
    /// Confidence parameter of the delay bound (recorded for the attacker)
    #[arg(long, default_value_t = 3.0)]
    k: f64,
    /// Observation horizon in seconds
    #[arg(long)]
    horizon: f64,
    /// Number of users, N
    #[arg(long)]
    n: u32,
    /// Partner count per user, m
    #[arg(long)]
    m: u32,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Partner count of non-target users (defaults to m)
    #[arg(long)]
    background_partners: Option<u32>,
    /// Draw non-uniform recipient weights
    #[arg(long)]
    weighted: bool,
    /// Output event-log path (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Also write the hidden ground truth (JSON)
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment grid (TOML)
    #[arg(long)]
    grid: PathBuf,
    /// Master seed; every trial seed derives from it
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    /// Output CSV of raw trial rows
    #[arg(long)]
    out: PathBuf,
    /// Optional output CSV of per-cell summaries
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Worker thread count (defaults to all cores)
    #[arg(long)]
    threads: Option<usize>,
}

/// The hidden answer, exported for later success evaluation.
#[derive(Serialize, Deserialize)]
struct TruthFile {
    n_users: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    batch_size: Option<u32>,
    n_partners: u32,
    target: u32,
    partners: Vec<u32>,
    pseudonyms: Vec<PseudonymEntry>,
}

#[derive(Serialize, Deserialize)]
struct PseudonymEntry {
    id: u32,
    partners: Vec<u32>,
}

impl TruthFile {
    fn from_truth(truth: &GroundTruth, batch_size: Option<u32>) -> Self {
        Self {
            n_users: truth.n_users(),
            batch_size,
            n_partners: truth.target_partners().len() as u32,
            target: truth.target().0,
            partners: truth.target_partners().iter().map(|u| u.0).collect(),
            pseudonyms: truth
                .pseudonyms()
                .iter()
                .map(|&p| PseudonymEntry {
                    id: p.0,
                    partners: truth
                        .partners(p)
                        .expect("pseudonyms are valid users")
                        .iter()
                        .map(|u| u.0)
                        .collect(),
                })
                .collect(),
        }
    }

    fn write(&self, path: &PathBuf) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("truth serializes");
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    fn load(path: &PathBuf) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Attack(args) => run_attack(args),
        Command::Sgmix(args) => run_sgmix(args),
        Command::Sweep(args) => run_sweep_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    if args.rounds == 0 {
        bail!("--rounds must be at least 1");
    }
    let mut config = SystemConfig::new(args.n, args.b, args.m);
    config.rng_seed = args.seed;
    config.defense = match args.defense {
        DefenseArg::None => Defense::None,
        DefenseArg::Sybil => Defense::Sybil,
    };
    config.n_pseudonyms = args.pseudonyms;
    config.pseudonym_partners = args.pseudonym_partners;
    config.target_rate = args.target_rate;
    config.background_partners = args.background_partners;
    if args.uniform_background {
        config.background = BackgroundModel::Uniform;
    }
    config.weighted_recipients = args.weighted;
    config
        .validate()
        .map_err(|e| anyhow!("{e} (check --n/--b/--m flags)"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let truth = GroundTruth::generate(&config, &mut rng)?;
    let trace = generate_trace(&config, &truth, args.rounds, &mut rng)?;
    let target_rounds = trace.rounds.iter().filter(|r| r.target_count > 0).count();
    harness::write_trace_jsonl(&trace, &args.out)?;
    if let Some(path) = &args.truth {
        TruthFile::from_truth(&truth, Some(args.b)).write(path)?;
    }
    println!(
        "wrote {} rounds to {}",
        trace.rounds.len(),
        args.out.display()
    );
    println!(
        "target: user {} ({} rounds with the target)",
        truth.target(),
        target_rounds
    );
    if let Some(path) = &args.truth {
        println!("ground truth: {}", path.display());
    }
    Ok(())
}

fn run_sgmix(args: SgmixArgs) -> Result<()> {
    let mut config = SystemConfig::new(args.n, 1, args.m);
    config.rng_seed = args.seed;
    config.chebyshev_k = args.k;
    config.background_partners = args.background_partners;
    config.weighted_recipients = args.weighted;
    config
        .validate()
        .map_err(|e| anyhow!("{e} (check --n/--m flags)"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let truth = GroundTruth::generate(&config, &mut rng)?;
    let log = simulate_sgmix(&truth, args.lambda, args.mu, args.horizon, &mut rng)
        .map_err(|e| anyhow!("{e} (check --lambda/--mu/--horizon flags)"))?;
    let target_sends = log
        .events()
        .iter()
        .filter(|e| e.sender == truth.target())
        .count();
    harness::write_event_log_jsonl(&log, &args.out)?;
    if let Some(path) = &args.truth {
        TruthFile::from_truth(&truth, None).write(path)?;
    }
    println!(
        "wrote {} messages over horizon {} to {}",
        log.len(),
        log.horizon(),
        args.out.display()
    );
    println!("target: user {} ({} sends)", truth.target(), target_sends);
    if let Some(path) = &args.truth {
        println!("ground truth: {}", path.display());
    }
    Ok(())
}

fn run_attack(args: AttackArgs) -> Result<()> {
    let truth = args.truth.as_ref().map(TruthFile::load).transpose()?;
    let n = args
        .n
        .or_else(|| truth.as_ref().map(|t| t.n_users))
        .ok_or_else(|| anyhow!("--n is required without --truth"))?;
    let target = args
        .target
        .or_else(|| truth.as_ref().map(|t| t.target))
        .ok_or_else(|| anyhow!("--target is required without --truth"))?;
    let m = args
        .m
        .or_else(|| truth.as_ref().map(|t| t.n_partners))
        .ok_or_else(|| anyhow!("--m is required without --truth"))?;
    if target >= n {
        bail!("--target {target} is outside the population [0, {n})");
    }
    let target = UserId(target);
    let kind: AttackKind = args.attack.into();

    let (trace, params, source) = if let Some(path) = &args.event_log {
        let horizon = args
            .horizon
            .ok_or_else(|| anyhow!("--horizon is required with --event-log"))?;
        let log = harness::read_event_log_jsonl(path, n, horizon)?;
        let mut vparams = VirtualizeParams::new(args.k);
        vparams.mu_hat = None;
        let (trace, effective_b) = virtualize_rounds_with(&log, target, &vparams)
            .map_err(|e| anyhow!("windowing {}: {e}", path.display()))?;
        let params = AttackParams::for_virtual_rounds(n, effective_b, m);
        let source = format!(
            "{} ({} messages -> {} virtual rounds, effective b {:.3})",
            path.display(),
            log.len(),
            trace.rounds.len(),
            effective_b
        );
        (trace, params, source)
    } else if let Some(path) = &args.trace {
        let b = args
            .b
            .or_else(|| truth.as_ref().and_then(|t| t.batch_size))
            .ok_or_else(|| anyhow!("--b is required without --truth"))?;
        if b == 0 {
            bail!("--b must be at least 1");
        }
        let trace = harness::read_trace_jsonl(path, n, Some(target))?;
        let mut config = SystemConfig::new(n, b, m);
        config.obs_limit = args.obs_limit;
        config.success_fraction = args.success_fraction;
        config
            .validate()
            .map_err(|e| anyhow!("{e} (check --obs-limit/--success-fraction flags)"))?;
        let params = AttackParams::from_config(&config);
        let source = format!("{} ({} rounds)", path.display(), trace.rounds.len());
        (trace, params, source)
    } else {
        bail!("one of --trace or --event-log is required");
    };

    let estimate = match kind {
        AttackKind::Standard => attacks::standard_sda_with(&trace, target, &params),
        AttackKind::Improved => attacks::improved_sda_with(&trace, target, &params),
    };
    let estimate = match estimate {
        Ok(e) => e,
        Err(AttackError::NoTargetRounds) => {
            bail!("no target rounds: user {target} never appears among the senders")
        }
        Err(e) => return Err(e.into()),
    };

    println!("attack: {kind}");
    println!("input: {source}");
    println!("target: user {target}");
    println!("observations used: {}", estimate.observations_used);
    println!("estimate sum: {:.6}", estimate.estimate.sum());
    println!("top-{m} ranked partners:");
    for (i, user) in estimate.ranked_partners.iter().enumerate() {
        println!(
            "{:5}. user {:<8} {:+.6}",
            i + 1,
            user.0,
            estimate.estimate.entry(*user)
        );
    }

    if let Some(truth) = &truth {
        let true_partners: HashSet<UserId> = truth.partners.iter().map(|&u| UserId(u)).collect();
        if true_partners.len() != m as usize {
            bail!(
                "--m {} does not match the {} partners in the truth file",
                m,
                true_partners.len()
            );
        }
        let hits = estimate
            .ranked_partners
            .iter()
            .filter(|u| true_partners.contains(u))
            .count();
        let needed = (args.success_fraction * m as f64).ceil() as usize;
        let success = evaluate_success(
            &estimate.ranked_partners,
            &true_partners,
            args.success_fraction,
        );
        println!("success: {success} ({hits}/{m} true partners ranked, needed {needed})");

        if args.event_log.is_none() {
            // Replay the stream to find the earliest success point under the
            // observation budget.
            let mut config = SystemConfig::new(n, params.scalar_b as u32, m);
            config.obs_limit = args.obs_limit;
            config.success_fraction = args.success_fraction;
            let outcome = required_observations(
                trace.rounds.iter().cloned(),
                target,
                &true_partners,
                &config,
                kind,
            )?;
            match outcome {
                AttackOutcome::Succeeded { observations } => {
                    println!("first success at observation {observations}");
                }
                AttackOutcome::Exhausted => {
                    println!(
                        "first success: none within the {} observation budget",
                        args.obs_limit
                    );
                }
            }
        }
    }
    Ok(())
}

fn run_sweep_cmd(args: SweepArgs) -> Result<()> {
    let grid = harness::ExperimentGrid::load(&args.grid)?;
    let rows = match args.threads {
        Some(threads) => {
            if threads == 0 {
                bail!("--threads must be at least 1");
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .context("building worker pool")?;
            pool.install(|| harness::run_sweep(&grid, args.master_seed))?
        }
        None => harness::run_sweep(&grid, args.master_seed)?,
    };
    harness::write_csv(&rows, &args.out)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    if let Some(path) = &args.summary {
        let summary = harness::summarize(&rows);
        harness::write_summary_csv(&summary, path)?;
        println!("wrote {} summaries to {}", summary.len(), path.display());
    }
    Ok(())
}
