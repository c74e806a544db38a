//! Threshold-mix trace generation.
//!
//! Each round draws `batch_size` senders uniformly with replacement from the
//! whole population and one recipient per sender from that sender's true
//! distribution. Under the sybil defense every pseudonym sends once for each
//! of the target's messages, so defended rounds grow beyond the nominal batch
//! size while the attacker keeps reasoning with the configured b.

use rand::Rng;

use crate::core::{Defense, GroundTruth, ModelError, RoundRecord, SystemConfig, UserId};

/// An ordered sequence of rounds over a fixed population.
#[derive(Debug, Clone)]
pub struct Trace {
    pub rounds: Vec<RoundRecord>,
    pub n_users: u32,
}

impl Trace {
    /// Build a trace, checking the structural invariants: indices consecutive
    /// from 1 and all user ids within `[0, n_users)`.
    pub fn new(rounds: Vec<RoundRecord>, n_users: u32) -> Self {
        for (i, round) in rounds.iter().enumerate() {
            assert_eq!(
                round.round_index,
                i as u64 + 1,
                "round indices must be consecutive from 1"
            );
            assert!(
                round
                    .senders
                    .iter()
                    .chain(round.receivers.iter())
                    .all(|u| u.0 < n_users),
                "round {} references a user outside [0, {})",
                round.round_index,
                n_users
            );
        }
        Self { rounds, n_users }
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

/// Generate a single round.
///
/// Draw order is fixed: the b sender slots, the optional forced target slot,
/// one recipient per slot in slot order, then (under sybil, when the target
/// sent) one extra slot per pseudonym per target message, recipient drawn
/// immediately after each.
pub fn generate_round(
    config: &SystemConfig,
    truth: &GroundTruth,
    rng: &mut impl Rng,
    round_index: u64,
) -> RoundRecord {
    debug_assert_eq!(config.n_users, truth.n_users());
    let b = config.batch_size as usize;
    let target = truth.target();

    let mut senders: Vec<UserId> = Vec::with_capacity(b + 2);
    for _ in 0..b {
        senders.push(UserId(rng.random_range(0..config.n_users)));
    }
    if let Some(rate) = config.target_rate {
        if rng.random::<f64>() < rate {
            senders.push(target);
        }
    }
    let mut receivers: Vec<UserId> = Vec::with_capacity(senders.len() + 2);
    for &sender in &senders {
        receivers.push(truth.sample_recipient(sender, rng));
    }
    let target_count = senders.iter().filter(|&&s| s == target).count() as u32;

    if config.defense == Defense::Sybil && target_count > 0 {
        for &pseudonym in truth.pseudonyms() {
            for _ in 0..target_count {
                senders.push(pseudonym);
                receivers.push(truth.sample_recipient(pseudonym, rng));
            }
        }
    }

    RoundRecord {
        round_index,
        senders,
        receivers,
        target_count,
    }
}

/// Generate `n_rounds` consecutive rounds. Deterministic given the rng state.
pub fn generate_trace(
    config: &SystemConfig,
    truth: &GroundTruth,
    n_rounds: u64,
    rng: &mut impl Rng,
) -> Result<Trace, ModelError> {
    config.validate()?;
    if n_rounds == 0 {
        return Err(ModelError::InvalidConfig(
            "a trace needs at least one round".into(),
        ));
    }
    let rounds = (1..=n_rounds)
        .map(|i| generate_round(config, truth, rng, i))
        .collect();
    Ok(Trace {
        rounds,
        n_users: config.n_users,
    })
}

/// An endless round generator for attacks that consume observations lazily.
pub struct RoundStream<'a, R: Rng> {
    config: &'a SystemConfig,
    truth: &'a GroundTruth,
    rng: R,
    next_index: u64,
}

impl<'a, R: Rng> RoundStream<'a, R> {
    pub fn new(config: &'a SystemConfig, truth: &'a GroundTruth, rng: R) -> Self {
        Self {
            config,
            truth,
            rng,
            next_index: 1,
        }
    }
}

impl<R: Rng> Iterator for RoundStream<'_, R> {
    type Item = RoundRecord;

    fn next(&mut self) -> Option<RoundRecord> {
        let round = generate_round(self.config, self.truth, &mut self.rng, self.next_index);
        self.next_index += 1;
        Some(round)
    }
}
