//! Experiment orchestration: parameter sweeps, repeated seeded trials,
//! summary statistics, and the CSV / JSONL interchange formats.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{required_observations, AttackError, AttackKind, AttackOutcome};
use crate::core::{Defense, GroundTruth, ModelError, RoundRecord, SystemConfig, UserId};
use crate::roundsim::{RoundStream, Trace};
use crate::sgmix::{EventLog, MixEvent, SgMixError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment grid: {0}")]
    InvalidGrid(String),
    #[error("reading {path}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("writing {path}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error on {path}")]
    Csv { path: String, source: csv::Error },
    #[error("parsing {path}")]
    Toml {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("parsing {path} line {line}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid trace in {path}: {reason}")]
    InvalidTrace { path: String, reason: String },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SgMix(#[from] SgMixError),
}

/// Which of N, b, m a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    #[serde(rename = "N")]
    NUsers,
    #[serde(rename = "b")]
    BatchSize,
    #[serde(rename = "m")]
    NPartners,
}

fn default_trials() -> u32 {
    100
}

fn default_attacks() -> Vec<AttackKind> {
    vec![AttackKind::Standard, AttackKind::Improved]
}

/// One experiment: a base configuration, one swept parameter, and the attacks
/// to run against every cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub base: SystemConfig,
    pub sweep_parameter: SweepParameter,
    pub sweep_values: Vec<u32>,
    #[serde(default = "default_trials")]
    pub trials_per_config: u32,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackKind>,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.sweep_values.is_empty() {
            return Err(HarnessError::InvalidGrid(
                "sweep_values must be nonempty".into(),
            ));
        }
        if self.sweep_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::InvalidGrid(
                "sweep_values must be strictly increasing".into(),
            ));
        }
        if self.attacks.is_empty() {
            return Err(HarnessError::InvalidGrid("attacks must be nonempty".into()));
        }
        let mut seen = HashSet::new();
        if self.attacks.iter().any(|a| !seen.insert(*a)) {
            return Err(HarnessError::InvalidGrid("attacks must be distinct".into()));
        }
        if self.trials_per_config == 0 {
            return Err(HarnessError::InvalidGrid(
                "trials_per_config must be at least 1".into(),
            ));
        }
        for (config_id, _) in self.sweep_values.iter().enumerate() {
            let config = self.cell_config(config_id as u32);
            config
                .validate()
                .map_err(|e| HarnessError::InvalidGrid(format!("cell {config_id}: {e}")))?;
        }
        Ok(())
    }

    /// The configuration of cell `config_id` (an index into `sweep_values`).
    pub fn cell_config(&self, config_id: u32) -> SystemConfig {
        let mut config = self.base.clone();
        let value = self.sweep_values[config_id as usize];
        match self.sweep_parameter {
            SweepParameter::NUsers => config.n_users = value,
            SweepParameter::BatchSize => config.batch_size = value,
            SweepParameter::NPartners => config.n_partners = value,
        }
        config
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
            path: display(path),
            source,
        })?;
        let grid: ExperimentGrid = toml::from_str(&text).map_err(|source| HarnessError::Toml {
            path: display(path),
            source: Box::new(source),
        })?;
        grid.validate()?;
        Ok(grid)
    }
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// One trial's result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_id: u32,
    #[serde(rename = "N")]
    pub n_users: u32,
    #[serde(rename = "b")]
    pub batch_size: u32,
    #[serde(rename = "m")]
    pub n_partners: u32,
    pub attack: AttackKind,
    pub defense: Defense,
    pub trial: u32,
    pub seed: u64,
    /// Target observations consumed until first success, or -1 when the
    /// trial exhausted its budget.
    pub observations_used: i64,
    pub succeeded: bool,
}

/// Per-cell aggregate over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_id: u32,
    #[serde(rename = "N")]
    pub n_users: u32,
    #[serde(rename = "b")]
    pub batch_size: u32,
    #[serde(rename = "m")]
    pub n_partners: u32,
    pub attack: AttackKind,
    pub defense: Defense,
    pub trials: u32,
    pub success_rate: f64,
    /// Median observations among successful trials; empty when none
    /// succeeded.
    pub median_obs: Option<f64>,
    pub mean_obs: Option<f64>,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-trial seed: a splitmix64 chain over master seed, cell id,
/// attack and trial index, so any row can be reproduced in isolation.
pub fn derive_seed(master_seed: u64, config_id: u32, attack: AttackKind, trial: u32) -> u64 {
    let attack_tag = match attack {
        AttackKind::Standard => 1u64,
        AttackKind::Improved => 2u64,
    };
    let mut s = splitmix64(master_seed);
    s = splitmix64(s ^ u64::from(config_id).wrapping_add(1));
    s = splitmix64(s ^ attack_tag);
    s = splitmix64(s ^ u64::from(trial).wrapping_add(1));
    s
}

/// Run one seeded trial: draw a population, stream rounds, count
/// observations until the attack first succeeds or the budget runs out.
pub fn run_trial(
    config: &SystemConfig,
    attack: AttackKind,
    seed: u64,
) -> Result<AttackOutcome, HarnessError> {
    let mut config = config.clone();
    config.rng_seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = GroundTruth::generate(&config, &mut rng)?;
    let true_partners: HashSet<UserId> = truth.target_partners().into_iter().collect();
    let stream = RoundStream::new(&config, &truth, rng);
    let outcome = required_observations(stream, truth.target(), &true_partners, &config, attack)?;
    Ok(outcome)
}

/// Run every (cell, attack, trial) combination of the grid. Trials run
/// concurrently; rows come back sorted by (config_id, attack, trial) and are
/// fully determined by `master_seed`.
pub fn run_sweep(grid: &ExperimentGrid, master_seed: u64) -> Result<Vec<ResultRow>, HarnessError> {
    grid.validate()?;
    let mut jobs = Vec::new();
    for config_id in 0..grid.sweep_values.len() as u32 {
        let config = grid.cell_config(config_id);
        for &attack in &grid.attacks {
            for trial in 0..grid.trials_per_config {
                jobs.push((config_id, config.clone(), attack, trial));
            }
        }
    }
    let mut rows = jobs
        .into_par_iter()
        .map(|(config_id, config, attack, trial)| {
            let seed = derive_seed(master_seed, config_id, attack, trial);
            let outcome = run_trial(&config, attack, seed)?;
            let (observations_used, succeeded) = match outcome {
                AttackOutcome::Succeeded { observations } => (observations as i64, true),
                AttackOutcome::Exhausted => (-1, false),
            };
            Ok(ResultRow {
                config_id,
                n_users: config.n_users,
                batch_size: config.batch_size,
                n_partners: config.n_partners,
                attack,
                defense: config.defense,
                trial,
                seed,
                observations_used,
                succeeded,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    rows.sort_by_key(|r| (r.config_id, r.attack as u8, r.trial));
    Ok(rows)
}

/// Aggregate rows into one summary per (cell, attack). Exhausted trials count
/// toward the success rate but are excluded from the medians.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(u32, u8), Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.config_id, row.attack as u8))
            .or_default()
            .push(row);
    }
    groups
        .into_values()
        .map(|group| {
            let first = group[0];
            let mut successes: Vec<i64> = group
                .iter()
                .filter(|r| r.succeeded)
                .map(|r| r.observations_used)
                .collect();
            successes.sort_unstable();
            let (median_obs, mean_obs) = if successes.is_empty() {
                (None, None)
            } else {
                let mid = successes.len() / 2;
                let median = if successes.len() % 2 == 1 {
                    successes[mid] as f64
                } else {
                    (successes[mid - 1] + successes[mid]) as f64 / 2.0
                };
                let mean = successes.iter().sum::<i64>() as f64 / successes.len() as f64;
                (Some(median), Some(mean))
            };
            SummaryRow {
                config_id: first.config_id,
                n_users: first.n_users,
                batch_size: first.batch_size,
                n_partners: first.n_partners,
                attack: first.attack,
                defense: first.defense,
                trials: group.len() as u32,
                success_rate: successes.len() as f64 / group.len() as f64,
                median_obs,
                mean_obs,
            }
        })
        .collect()
}

/// Write raw trial rows. Header:
/// `config_id,N,b,m,attack,defense,trial,seed,observations_used,succeeded`.
pub fn write_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: display(path),
        source,
    })?;
    for row in rows {
        writer.serialize(row).map_err(|source| HarnessError::Csv {
            path: display(path),
            source,
        })?;
    }
    ensure_header_only_file::<ResultRow>(&mut writer, rows.is_empty(), path)?;
    writer.flush().map_err(|source| HarnessError::Write {
        path: display(path),
        source,
    })?;
    Ok(())
}

/// Write per-cell summaries. Header:
/// `config_id,N,b,m,attack,defense,trials,success_rate,median_obs,mean_obs`.
pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: display(path),
        source,
    })?;
    for row in rows {
        writer.serialize(row).map_err(|source| HarnessError::Csv {
            path: display(path),
            source,
        })?;
    }
    ensure_header_only_file::<SummaryRow>(&mut writer, rows.is_empty(), path)?;
    writer.flush().map_err(|source| HarnessError::Write {
        path: display(path),
        source,
    })?;
    Ok(())
}

/// The csv writer only emits the header alongside the first record; an empty
/// result set still needs the header line.
fn ensure_header_only_file<T: HeaderSpec>(
    writer: &mut csv::Writer<File>,
    empty: bool,
    path: &Path,
) -> Result<(), HarnessError> {
    if empty {
        writer
            .write_record(T::HEADER)
            .map_err(|source| HarnessError::Csv {
                path: display(path),
                source,
            })?;
    }
    Ok(())
}

trait HeaderSpec {
    const HEADER: &'static [&'static str];
}

impl HeaderSpec for ResultRow {
    const HEADER: &'static [&'static str] = &[
        "config_id",
        "N",
        "b",
        "m",
        "attack",
        "defense",
        "trial",
        "seed",
        "observations_used",
        "succeeded",
    ];
}

impl HeaderSpec for SummaryRow {
    const HEADER: &'static [&'static str] = &[
        "config_id",
        "N",
        "b",
        "m",
        "attack",
        "defense",
        "trials",
        "success_rate",
        "median_obs",
        "mean_obs",
    ];
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>, HarnessError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|source| HarnessError::Csv {
        path: display(path),
        source,
    })?;
    reader
        .deserialize()
        .collect::<Result<Vec<ResultRow>, csv::Error>>()
        .map_err(|source| HarnessError::Csv {
            path: display(path),
            source,
        })
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    round: u64,
    senders: Vec<u32>,
    receivers: Vec<u32>,
}

/// Export a trace as JSONL, one object per round.
///
/// The sender and receiver arrays are sorted independently: the positional
/// sender-to-receiver pairing is simulator-private and must not reach the
/// attacker-facing file.
pub fn write_trace_jsonl(trace: &Trace, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| HarnessError::Write {
        path: display(path),
        source,
    })?;
    let mut out = BufWriter::new(file);
    for round in &trace.rounds {
        let mut senders: Vec<u32> = round.senders.iter().map(|u| u.0).collect();
        let mut receivers: Vec<u32> = round.receivers.iter().map(|u| u.0).collect();
        senders.sort_unstable();
        receivers.sort_unstable();
        let line = TraceLine {
            round: round.round_index,
            senders,
            receivers,
        };
        serde_json::to_writer(&mut out, &line).map_err(|source| HarnessError::Json {
            path: display(path),
            line: 0,
            source,
        })?;
        out.write_all(b"\n").map_err(|source| HarnessError::Write {
            path: display(path),
            source,
        })?;
    }
    out.flush().map_err(|source| HarnessError::Write {
        path: display(path),
        source,
    })?;
    Ok(())
}

/// Read a JSONL trace. `target`, when known, fills in per-round target
/// multiplicities so the attacks can reuse the records directly.
pub fn read_trace_jsonl(
    path: impl AsRef<Path>,
    n_users: u32,
    target: Option<UserId>,
) -> Result<Trace, HarnessError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| HarnessError::Read {
        path: display(path),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut rounds = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| HarnessError::Read {
            path: display(path),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|source| HarnessError::Json {
                path: display(path),
                line: i + 1,
                source,
            })?;
        if parsed.round != rounds.len() as u64 + 1 {
            return Err(HarnessError::InvalidTrace {
                path: display(path),
                reason: format!(
                    "round indices must be consecutive from 1; line {} has round {}",
                    i + 1,
                    parsed.round
                ),
            });
        }
        if parsed
            .senders
            .iter()
            .chain(parsed.receivers.iter())
            .any(|&u| u >= n_users)
        {
            return Err(HarnessError::InvalidTrace {
                path: display(path),
                reason: format!(
                    "round {} references a user outside [0, {n_users})",
                    parsed.round
                ),
            });
        }
        let senders: Vec<UserId> = parsed.senders.into_iter().map(UserId).collect();
        let receivers: Vec<UserId> = parsed.receivers.into_iter().map(UserId).collect();
        let target_count = target
            .map(|t| senders.iter().filter(|&&s| s == t).count() as u32)
            .unwrap_or(0);
        rounds.push(RoundRecord {
            round_index: parsed.round,
            senders,
            receivers,
            target_count,
        });
    }
    Ok(Trace::new(rounds, n_users))
}

/// Export a full event log as JSONL, one message per line with send and
/// delivery timestamps at full float precision.
pub fn write_event_log_jsonl(log: &EventLog, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| HarnessError::Write {
        path: display(path),
        source,
    })?;
    let mut out = BufWriter::new(file);
    for event in log.events() {
        serde_json::to_writer(&mut out, event).map_err(|source| HarnessError::Json {
            path: display(path),
            line: 0,
            source,
        })?;
        out.write_all(b"\n").map_err(|source| HarnessError::Write {
            path: display(path),
            source,
        })?;
    }
    out.flush().map_err(|source| HarnessError::Write {
        path: display(path),
        source,
    })?;
    Ok(())
}

pub fn read_event_log_jsonl(
    path: impl AsRef<Path>,
    n_users: u32,
    horizon: f64,
) -> Result<EventLog, HarnessError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| HarnessError::Read {
        path: display(path),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut events: Vec<MixEvent> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| HarnessError::Read {
            path: display(path),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let event: MixEvent = serde_json::from_str(&line).map_err(|source| HarnessError::Json {
            path: display(path),
            line: i + 1,
            source,
        })?;
        events.push(event);
    }
    Ok(EventLog::new(events, horizon, n_users)?)
}
