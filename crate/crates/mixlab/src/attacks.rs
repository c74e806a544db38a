//! Statistical disclosure attacks over round traces.
//!
//! The standard attack averages the observation vectors of rounds the target
//! participated in and subtracts a uniform background. The improved attack
//! replaces the uniform background with an estimate built from the target's
//! cloak users: everyone who ever shared a round with her. Both produce a
//! ranked candidate list of the target's likely partners.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{BehaviorVector, ModelError, RoundRecord, SystemConfig, UserId};
use crate::roundsim::Trace;

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Standard,
    Improved,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::Standard => f.write_str("standard"),
            AttackKind::Improved => f.write_str("improved"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("no rounds with the target among the senders")]
    NoTargetRounds,
    #[error("no background rounds available to estimate cloak behavior")]
    NoBackgroundRounds,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Round indices split by whether the target sent in them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPartition {
    /// 1-based indices of rounds containing the target as a sender.
    pub with_target: Vec<u64>,
    pub without_target: Vec<u64>,
}

/// Attack output: the reconstructed behavior vector and the top-m candidate
/// partners derived from it.
#[derive(Debug, Clone)]
pub struct TargetEstimate {
    pub estimate: BehaviorVector,
    /// The m highest-valued users, by entry descending, ties by ascending id.
    pub ranked_partners: Vec<UserId>,
    /// Number of target rounds the estimate consumed.
    pub observations_used: usize,
}

/// Per-round observation normalizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservationNorm {
    /// Divide receiver multiplicities by the nominal batch size. The right
    /// choice for threshold-mix rounds, where the attacker knows b.
    FixedBatch(u32),
    /// Divide by the round's own receiver-message count. Used for windowed
    /// rounds extracted from a continuous-time log, where each round blends a
    /// different number of messages.
    RoundLocal,
}

impl ObservationNorm {
    fn denominator(self, round: &RoundRecord) -> f64 {
        match self {
            ObservationNorm::FixedBatch(b) => b as f64,
            ObservationNorm::RoundLocal => round.receivers.len() as f64,
        }
    }
}

/// Everything the estimators need to know about the observation model.
#[derive(Debug, Clone, Copy)]
pub struct AttackParams {
    pub n_users: u32,
    /// The scalar b of the estimators; the nominal batch size for threshold
    /// traces, the mean sender-window size for virtualized ones.
    pub scalar_b: f64,
    pub norm: ObservationNorm,
    /// How many candidates to rank.
    pub n_partners: u32,
}

impl AttackParams {
    pub fn from_config(config: &SystemConfig) -> Self {
        Self {
            n_users: config.n_users,
            scalar_b: config.batch_size as f64,
            norm: ObservationNorm::FixedBatch(config.batch_size),
            n_partners: config.n_partners,
        }
    }

    /// Parameters for rounds virtualized out of a continuous-time log.
    pub fn for_virtual_rounds(n_users: u32, effective_b: f64, n_partners: u32) -> Self {
        Self {
            n_users,
            scalar_b: effective_b,
            norm: ObservationNorm::RoundLocal,
            n_partners,
        }
    }

    /// Let the attacker take the mean observed round size as its batch
    /// parameter instead of trusting a nominal b. An alternative worth
    /// comparing when a defense inflates rounds beyond the nominal size.
    pub fn for_observed_rounds(trace: &Trace, n_partners: u32) -> Self {
        let rounds = trace.rounds.len().max(1);
        let total: usize = trace.rounds.iter().map(|r| r.senders.len()).sum();
        Self {
            n_users: trace.n_users,
            scalar_b: total as f64 / rounds as f64,
            norm: ObservationNorm::RoundLocal,
            n_partners,
        }
    }
}

/// Add one round's observation vector (scaled receiver multiplicities) into
/// `acc`. A round with no receivers contributes nothing.
fn accumulate_observation(acc: &mut [f64], round: &RoundRecord, norm: ObservationNorm) {
    if round.receivers.is_empty() {
        return;
    }
    let share = 1.0 / norm.denominator(round);
    for r in &round.receivers {
        acc[r.index()] += share;
    }
}

fn round_at(trace: &Trace, index: u64) -> &RoundRecord {
    &trace.rounds[(index - 1) as usize]
}

/// The per-round receiver distribution: entry j is the multiplicity of j
/// among the receivers divided by `batch_size`.
pub fn observation_vector(
    round: &RoundRecord,
    batch_size: u32,
    n_users: u32,
) -> Result<BehaviorVector, AttackError> {
    if batch_size == 0 {
        return Err(AttackError::ZeroBatch);
    }
    let mut v = BehaviorVector::zeros(n_users as usize);
    accumulate_observation(
        v.as_mut_slice(),
        round,
        ObservationNorm::FixedBatch(batch_size),
    );
    Ok(v)
}

/// Split rounds by the membership predicate "the target appears among the
/// senders".
pub fn partition_rounds(trace: &Trace, target: UserId) -> RoundPartition {
    let mut with_target = Vec::new();
    let mut without_target = Vec::new();
    for round in &trace.rounds {
        if round.contains_sender(target) {
            with_target.push(round.round_index);
        } else {
            without_target.push(round.round_index);
        }
    }
    RoundPartition {
        with_target,
        without_target,
    }
}

/// Users who shared at least one round with the target, target excluded.
pub fn cloak_set(trace: &Trace, partition: &RoundPartition, target: UserId) -> HashSet<UserId> {
    let mut cloak = HashSet::new();
    for &idx in &partition.with_target {
        for &sender in &round_at(trace, idx).senders {
            if sender != target {
                cloak.insert(sender);
            }
        }
    }
    cloak
}

/// Target-free rounds in which at least one cloak user sent.
pub fn background_rounds(
    trace: &Trace,
    partition: &RoundPartition,
    cloak: &HashSet<UserId>,
) -> Vec<u64> {
    partition
        .without_target
        .iter()
        .copied()
        .filter(|&idx| {
            round_at(trace, idx)
                .senders
                .iter()
                .any(|s| cloak.contains(s))
        })
        .collect()
}

/// Mean observation vector over the background rounds: the attacker's
/// estimate of how cloak users behave.
pub fn cloak_estimate(
    trace: &Trace,
    background: &[u64],
    batch_size: u32,
    n_users: u32,
) -> Result<BehaviorVector, AttackError> {
    if batch_size == 0 {
        return Err(AttackError::ZeroBatch);
    }
    cloak_estimate_with(
        trace,
        background,
        ObservationNorm::FixedBatch(batch_size),
        n_users,
    )
}

fn cloak_estimate_with(
    trace: &Trace,
    background: &[u64],
    norm: ObservationNorm,
    n_users: u32,
) -> Result<BehaviorVector, AttackError> {
    if background.is_empty() {
        return Err(AttackError::NoBackgroundRounds);
    }
    let mut v = BehaviorVector::zeros(n_users as usize);
    for &idx in background {
        accumulate_observation(v.as_mut_slice(), round_at(trace, idx), norm);
    }
    let scale = 1.0 / background.len() as f64;
    for entry in v.as_mut_slice() {
        *entry *= scale;
    }
    Ok(v)
}

/// Average number of the target's messages per round she participates in.
pub fn mean_target_share(
    trace: &Trace,
    partition: &RoundPartition,
    target: UserId,
) -> Result<f64, AttackError> {
    if partition.with_target.is_empty() {
        return Err(AttackError::NoTargetRounds);
    }
    let total: u64 = partition
        .with_target
        .iter()
        .map(|&idx| round_at(trace, idx).sender_multiplicity(target) as u64)
        .sum();
    Ok(total as f64 / partition.with_target.len() as f64)
}

/// The standard estimator: scale the mean target-round observation vector by
/// b and subtract the uniform background (b - 1) / N.
pub fn standard_sda(
    trace: &Trace,
    target: UserId,
    config: &SystemConfig,
) -> Result<TargetEstimate, AttackError> {
    standard_sda_with(trace, target, &AttackParams::from_config(config))
}

pub fn standard_sda_with(
    trace: &Trace,
    target: UserId,
    params: &AttackParams,
) -> Result<TargetEstimate, AttackError> {
    let partition = partition_rounds(trace, target);
    if partition.with_target.is_empty() {
        return Err(AttackError::NoTargetRounds);
    }
    let n = params.n_users as usize;
    let mut sum_g = vec![0.0; n];
    for &idx in &partition.with_target {
        accumulate_observation(&mut sum_g, round_at(trace, idx), params.norm);
    }
    let t = partition.with_target.len() as f64;
    let b = params.scalar_b;
    let uniform = 1.0 / params.n_users as f64;
    let entries: Vec<f64> = sum_g
        .iter()
        .map(|&s| b * s / t - (b - 1.0) * uniform)
        .collect();
    let estimate = BehaviorVector::from_entries(entries);
    let ranked_partners = rank_partners(&estimate, params.n_partners as usize);
    Ok(TargetEstimate {
        estimate,
        ranked_partners,
        observations_used: partition.with_target.len(),
    })
}

/// The improved estimator: subtract the cloak-user estimate instead of the
/// uniform vector, weighting by the target's mean per-round message share.
pub fn improved_sda(
    trace: &Trace,
    target: UserId,
    config: &SystemConfig,
) -> Result<TargetEstimate, AttackError> {
    improved_sda_with(trace, target, &AttackParams::from_config(config))
}

pub fn improved_sda_with(
    trace: &Trace,
    target: UserId,
    params: &AttackParams,
) -> Result<TargetEstimate, AttackError> {
    let partition = partition_rounds(trace, target);
    if partition.with_target.is_empty() {
        return Err(AttackError::NoTargetRounds);
    }
    let cloak = cloak_set(trace, &partition, target);
    let background = background_rounds(trace, &partition, &cloak);
    let cloak_usr = cloak_estimate_with(trace, &background, params.norm, params.n_users)?;
    let share = mean_target_share(trace, &partition, target)?;

    let n = params.n_users as usize;
    let mut sum_g = vec![0.0; n];
    for &idx in &partition.with_target {
        accumulate_observation(&mut sum_g, round_at(trace, idx), params.norm);
    }
    let t = partition.with_target.len() as f64;
    let b = params.scalar_b;
    let lead = b / (share * t);
    let coef = (b - share) / share;
    let entries: Vec<f64> = sum_g
        .iter()
        .zip(cloak_usr.entries())
        .map(|(&s, &c)| lead * s - coef * c)
        .collect();
    let estimate = BehaviorVector::from_entries(entries);
    let ranked_partners = rank_partners(&estimate, params.n_partners as usize);
    Ok(TargetEstimate {
        estimate,
        ranked_partners,
        observations_used: partition.with_target.len(),
    })
}

/// The m users with the largest estimate entries, sorted by entry descending,
/// ties broken by ascending id.
pub fn rank_partners(estimate: &BehaviorVector, m: usize) -> Vec<UserId> {
    let n = estimate.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let values = estimate.entries();
    let mut ids: Vec<u32> = (0..n as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        values[*b as usize]
            .total_cmp(&values[*a as usize])
            .then_with(|| a.cmp(b))
    };
    if m < n {
        ids.select_nth_unstable_by(m - 1, cmp);
    }
    let top = &mut ids[..m];
    top.sort_unstable_by(cmp);
    top.iter().map(|&i| UserId(i)).collect()
}

/// True when the ranked list recovers at least
/// `ceil(success_fraction * m)` of the true partners.
pub fn evaluate_success(
    ranked: &[UserId],
    true_partners: &HashSet<UserId>,
    success_fraction: f64,
) -> bool {
    debug_assert_eq!(ranked.len(), true_partners.len());
    let needed = (success_fraction * true_partners.len() as f64).ceil() as usize;
    let overlap = ranked.iter().filter(|u| true_partners.contains(u)).count();
    overlap >= needed
}

/// Outcome of the observation-counting loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackOutcome {
    /// The attack first met the success criterion after this many target
    /// observations.
    Succeeded { observations: usize },
    /// The observation budget ran out (or the stream ended) without success.
    Exhausted,
}

/// Consume rounds from a stream, re-evaluating the chosen attack after every
/// round that adds a target observation, and report the smallest observation
/// count at which it first succeeds.
///
/// The improved attack silently skips evaluation points where no background
/// round has been seen yet. By default the budget counts target observations;
/// `count_raw_rounds` switches it to counting every consumed round.
pub fn required_observations<I>(
    rounds: I,
    target: UserId,
    true_partners: &HashSet<UserId>,
    config: &SystemConfig,
    attack: AttackKind,
) -> Result<AttackOutcome, AttackError>
where
    I: IntoIterator<Item = RoundRecord>,
{
    config.validate()?;
    debug_assert_eq!(true_partners.len(), config.n_partners as usize);
    let params = AttackParams::from_config(config);
    let mut engine = IncrementalSda::new(&params, target, attack);
    let mut raw_rounds = 0u64;

    for round in rounds {
        raw_rounds += 1;
        if engine.process_round(&round) {
            if let Some(ranked) = engine.evaluate() {
                if evaluate_success(&ranked, true_partners, config.success_fraction) {
                    return Ok(AttackOutcome::Succeeded {
                        observations: engine.observations(),
                    });
                }
            }
            if !config.count_raw_rounds && engine.observations() >= config.obs_limit as usize {
                return Ok(AttackOutcome::Exhausted);
            }
        }
        if config.count_raw_rounds && raw_rounds >= u64::from(config.obs_limit) {
            return Ok(AttackOutcome::Exhausted);
        }
    }
    Ok(AttackOutcome::Exhausted)
}

/// Streaming attack state.
///
/// Running sums replace the per-evaluation recomputation. With a fixed batch
/// normalizer every accumulation adds the same constant per message, so each
/// per-user sum depends only on its message count and the state reproduces
/// the one-shot estimators bit for bit at every evaluation point.
struct IncrementalSda {
    target: UserId,
    scalar_b: f64,
    norm: ObservationNorm,
    n_users: usize,
    n_partners: usize,
    sum_g: Vec<f64>,
    observations: usize,
    target_messages: u64,
    improved: Option<ImprovedState>,
}

struct ImprovedState {
    cloak: Vec<bool>,
    sum_p: Vec<f64>,
    p_count: usize,
    pending: Vec<PendingRound>,
    /// For each user, the pending rounds they sent in; drained when the user
    /// joins the cloak.
    by_user: Vec<Vec<u32>>,
}

struct PendingRound {
    receivers: Vec<UserId>,
    folded: bool,
}

impl IncrementalSda {
    fn new(params: &AttackParams, target: UserId, attack: AttackKind) -> Self {
        let n = params.n_users as usize;
        let improved = match attack {
            AttackKind::Standard => None,
            AttackKind::Improved => Some(ImprovedState {
                cloak: vec![false; n],
                sum_p: vec![0.0; n],
                p_count: 0,
                pending: Vec::new(),
                by_user: vec![Vec::new(); n],
            }),
        };
        Self {
            target,
            scalar_b: params.scalar_b,
            norm: params.norm,
            n_users: n,
            n_partners: params.n_partners as usize,
            sum_g: vec![0.0; n],
            observations: 0,
            target_messages: 0,
            improved,
        }
    }

    fn observations(&self) -> usize {
        self.observations
    }

    /// Feed one round; returns true when it was a target round (and thus an
    /// evaluation point).
    fn process_round(&mut self, round: &RoundRecord) -> bool {
        let multiplicity = round.sender_multiplicity(self.target);
        if multiplicity > 0 {
            accumulate_observation(&mut self.sum_g, round, self.norm);
            self.observations += 1;
            self.target_messages += u64::from(multiplicity);
            if let Some(state) = &mut self.improved {
                let norm = self.norm;
                for &sender in &round.senders {
                    if sender != self.target && !state.cloak[sender.index()] {
                        state.cloak[sender.index()] = true;
                        state.fold_pending_for(sender, norm);
                    }
                }
            }
            true
        } else {
            if let Some(state) = &mut self.improved {
                state.observe_background(round, self.norm);
            }
            false
        }
    }

    /// Build the current estimate and rank candidates. `None` when the
    /// improved attack has no background rounds yet.
    fn evaluate(&self) -> Option<Vec<UserId>> {
        let t = self.observations as f64;
        let b = self.scalar_b;
        let entries: Vec<f64> = match &self.improved {
            None => {
                let uniform = 1.0 / self.n_users as f64;
                self.sum_g
                    .iter()
                    .map(|&s| b * s / t - (b - 1.0) * uniform)
                    .collect()
            }
            Some(state) => {
                if state.p_count == 0 {
                    return None;
                }
                let share = self.target_messages as f64 / t;
                let lead = b / (share * t);
                let coef = (b - share) / share;
                let inv_p = 1.0 / state.p_count as f64;
                self.sum_g
                    .iter()
                    .zip(state.sum_p.iter())
                    .map(|(&s, &c)| lead * s - coef * (c * inv_p))
                    .collect()
            }
        };
        Some(rank_partners(
            &BehaviorVector::from_entries(entries),
            self.n_partners,
        ))
    }
}

impl ImprovedState {
    fn observe_background(&mut self, round: &RoundRecord, norm: ObservationNorm) {
        if round.senders.iter().any(|s| self.cloak[s.index()]) {
            accumulate_observation(&mut self.sum_p, round, norm);
            self.p_count += 1;
        } else {
            let id = self.pending.len() as u32;
            for &sender in &round.senders {
                self.by_user[sender.index()].push(id);
            }
            self.pending.push(PendingRound {
                receivers: round.receivers.clone(),
                folded: false,
            });
        }
    }

    fn fold_pending_for(&mut self, user: UserId, norm: ObservationNorm) {
        for id in std::mem::take(&mut self.by_user[user.index()]) {
            let entry = &mut self.pending[id as usize];
            if entry.folded {
                continue;
            }
            entry.folded = true;
            if !entry.receivers.is_empty() {
                let share = match norm {
                    ObservationNorm::FixedBatch(b) => 1.0 / b as f64,
                    ObservationNorm::RoundLocal => 1.0 / entry.receivers.len() as f64,
                };
                for r in &entry.receivers {
                    self.sum_p[r.index()] += share;
                }
            }
            self.p_count += 1;
            entry.receivers = Vec::new();
        }
    }
}
