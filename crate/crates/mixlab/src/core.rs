//! Shared domain types: user identities, system configuration, ground-truth
//! communication behavior, probability vectors, and per-round records.
//!
//! Everything here is an immutable value after construction, so trial workers
//! can share ground truth and configuration freely across threads.

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::Distribution as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a user in the system, in `[0, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl UserId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Generation-side defense applied while producing rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Defense {
    #[default]
    None,
    /// The target also operates unlinkable pseudonym identities that send
    /// whenever she sends.
    Sybil,
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defense::None => f.write_str("none"),
            Defense::Sybil => f.write_str("sybil"),
        }
    }
}

/// How non-target users choose their recipients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundModel {
    /// Each non-target user owns a fixed partner set (size
    /// `background_partners`, defaulting to `n_partners`).
    #[default]
    PartnerSets,
    /// Each non-target user sends uniformly to everyone but herself.
    Uniform,
}

fn default_obs_limit() -> u32 {
    5000
}
fn default_success_fraction() -> f64 {
    0.8
}
fn default_chebyshev_k() -> f64 {
    3.0
}
fn default_n_pseudonyms() -> u32 {
    1
}

/// Parameters of one simulated system configuration.
///
/// `n_users`, `batch_size` and `n_partners` are the classic N, b and m of the
/// threshold-mix model; the rest controls attack budgets, defenses and the
/// shape of the generated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Total number of users, N.
    pub n_users: u32,
    /// Messages flushed per threshold-mix round, b.
    pub batch_size: u32,
    /// Size of the target's partner set, m.
    pub n_partners: u32,
    /// Attack gives up after this many target observations.
    #[serde(default = "default_obs_limit")]
    pub obs_limit: u32,
    /// Fraction of true partners the attack must rank in its top m.
    #[serde(default = "default_success_fraction")]
    pub success_fraction: f64,
    /// Confidence parameter k of the one-sided Chebyshev delay bound.
    #[serde(default = "default_chebyshev_k")]
    pub chebyshev_k: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub defense: Defense,
    /// Number of pseudonym identities under the sybil defense.
    #[serde(default = "default_n_pseudonyms")]
    pub n_pseudonyms: u32,
    /// Partner-set size of each pseudonym, m'. Defaults to `n_partners`.
    #[serde(default)]
    pub pseudonym_partners: Option<u32>,
    /// When set, force the target into each round as one extra sender slot
    /// with this probability. Speeds up experiments at large N where natural
    /// sampling would make target rounds rare. `None` keeps pure sampling.
    #[serde(default)]
    pub target_rate: Option<f64>,
    /// Partner-set size of non-target users. Defaults to `n_partners`.
    #[serde(default)]
    pub background_partners: Option<u32>,
    #[serde(default)]
    pub background: BackgroundModel,
    /// Draw random per-partner weights instead of uniform 1/m.
    #[serde(default)]
    pub weighted_recipients: bool,
    /// Count every consumed round against `obs_limit` instead of only rounds
    /// in which the target participates.
    #[serde(default)]
    pub count_raw_rounds: bool,
}

impl SystemConfig {
    /// A configuration with the given N, b, m and default everything else.
    pub fn new(n_users: u32, batch_size: u32, n_partners: u32) -> Self {
        Self {
            n_users,
            batch_size,
            n_partners,
            obs_limit: default_obs_limit(),
            success_fraction: default_success_fraction(),
            chebyshev_k: default_chebyshev_k(),
            rng_seed: 0,
            defense: Defense::None,
            n_pseudonyms: default_n_pseudonyms(),
            pseudonym_partners: None,
            target_rate: None,
            background_partners: None,
            background: BackgroundModel::PartnerSets,
            weighted_recipients: false,
            count_raw_rounds: false,
        }
    }

    /// Partner-set size used for pseudonyms.
    pub fn pseudonym_partner_count(&self) -> u32 {
        self.pseudonym_partners.unwrap_or(self.n_partners)
    }

    /// Partner-set size used for non-target users.
    pub fn background_partner_count(&self) -> u32 {
        self.background_partners.unwrap_or(self.n_partners)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_users == 0 {
            return Err(ModelError::NoUsers);
        }
        if self.n_partners == 0 || self.n_partners > self.n_users {
            return Err(ModelError::InvalidConfig(format!(
                "n_partners must satisfy 1 <= m <= N, got m={} N={}",
                self.n_partners, self.n_users
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if self.obs_limit == 0 {
            return Err(ModelError::InvalidConfig(
                "obs_limit must be at least 1".into(),
            ));
        }
        let fraction = self.success_fraction;
        if fraction.is_nan() || fraction <= 0.0 || fraction > 1.0 {
            return Err(ModelError::InvalidConfig(format!(
                "success_fraction must be in (0, 1], got {fraction}"
            )));
        }
        if self.chebyshev_k.is_nan() || self.chebyshev_k <= 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "chebyshev_k must be positive, got {}",
                self.chebyshev_k
            )));
        }
        if let Some(rate) = self.target_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(ModelError::InvalidConfig(format!(
                    "target_rate must be in [0, 1], got {rate}"
                )));
            }
        }
        if self.defense == Defense::Sybil {
            if self.n_pseudonyms == 0 {
                return Err(ModelError::InvalidConfig(
                    "sybil defense requires at least one pseudonym".into(),
                ));
            }
            if u64::from(self.n_pseudonyms) >= u64::from(self.n_users) {
                return Err(ModelError::InvalidConfig(format!(
                    "cannot allocate {} pseudonyms among {} users",
                    self.n_pseudonyms, self.n_users
                )));
            }
            let mp = self.pseudonym_partner_count();
            if mp == 0 || mp > self.n_users {
                return Err(ModelError::InvalidConfig(format!(
                    "pseudonym_partners must satisfy 1 <= m' <= N, got m'={mp}"
                )));
            }
        }
        let bg = self.background_partner_count();
        if bg == 0 || bg > self.n_users {
            return Err(ModelError::InvalidConfig(format!(
                "background_partners must satisfy 1 <= count <= N, got {bg}"
            )));
        }
        Ok(())
    }
}

/// Errors from constructing or querying the domain model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("population must contain at least one user")]
    NoUsers,
    #[error("unknown user {user} for a population of {n_users}")]
    UnknownUser { user: u32, n_users: u32 },
    #[error("user has an empty recipient set")]
    EmptyPartners,
    #[error("partner list contains duplicates")]
    DuplicatePartners,
    #[error("expected {expected} weights, got {got}")]
    WeightLengthMismatch { expected: usize, got: usize },
    #[error("recipient weights must be nonnegative and sum to 1, got sum {0}")]
    BadWeights(f64),
}

/// A length-N vector of reals over users.
///
/// True behavior vectors are probability distributions (nonnegative, unit
/// sum). Attack estimates also live here but may carry negative entries; the
/// subtraction step of the estimators can push components below zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorVector(Vec<f64>);

impl BehaviorVector {
    pub fn zeros(n_users: usize) -> Self {
        Self(vec![0.0; n_users])
    }

    pub fn from_entries(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entry(&self, user: UserId) -> f64 {
        self.0[user.index()]
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// True when nonnegative and unit-sum within `tol`.
    pub fn is_distribution(&self, tol: f64) -> bool {
        self.0.iter().all(|&x| x >= 0.0) && (self.sum() - 1.0).abs() <= tol
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A user's fixed recipient set with optional non-uniform weights.
#[derive(Debug, Clone)]
pub struct PartnerSet {
    ids: Vec<UserId>,
    /// `None` means uniform over `ids`.
    weights: Option<Vec<f64>>,
    /// Cumulative weights, present only in the weighted case.
    cumulative: Vec<f64>,
}

impl PartnerSet {
    pub fn uniform(ids: Vec<UserId>) -> Result<Self, ModelError> {
        Self::check_ids(&ids)?;
        Ok(Self {
            ids,
            weights: None,
            cumulative: Vec::new(),
        })
    }

    pub fn weighted(ids: Vec<UserId>, weights: Vec<f64>) -> Result<Self, ModelError> {
        Self::check_ids(&ids)?;
        if weights.len() != ids.len() {
            return Err(ModelError::WeightLengthMismatch {
                expected: ids.len(),
                got: weights.len(),
            });
        }
        if let Some(&bad) = weights.iter().find(|&&w| w < 0.0 || !w.is_finite()) {
            return Err(ModelError::BadWeights(bad));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::BadWeights(sum));
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(Self {
            ids,
            weights: Some(weights),
            cumulative,
        })
    }

    fn check_ids(ids: &[UserId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyPartners);
        }
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::DuplicatePartners);
        }
        Ok(())
    }

    pub fn ids(&self) -> &[UserId] {
        &self.ids
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.ids.len() as f64,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> UserId {
        match &self.weights {
            None => self.ids[rng.random_range(0..self.ids.len())],
            Some(_) => {
                let u: f64 = rng.random();
                let i = self.cumulative.partition_point(|&c| c < u);
                self.ids[i.min(self.ids.len() - 1)]
            }
        }
    }
}

/// Where a user's messages go.
#[derive(Debug, Clone)]
pub enum Recipients {
    /// Uniform over every user but the sender.
    Everyone,
    Partners(PartnerSet),
}

/// The hidden answer an attack tries to recover: per-user recipient behavior,
/// the target identity, and any pseudonyms linked to the target.
///
/// The pseudonym linkage exists only here; rounds never expose it.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    n_users: u32,
    behaviors: Vec<Recipients>,
    target: UserId,
    pseudonyms: Vec<UserId>,
}

impl GroundTruth {
    /// Validating constructor for hand-built populations.
    pub fn new(
        n_users: u32,
        behaviors: Vec<Recipients>,
        target: UserId,
        pseudonyms: Vec<UserId>,
    ) -> Result<Self, ModelError> {
        if n_users == 0 {
            return Err(ModelError::NoUsers);
        }
        if behaviors.len() != n_users as usize {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} behaviors, got {}",
                n_users,
                behaviors.len()
            )));
        }
        let check_user = |user: UserId| {
            if user.0 >= n_users {
                Err(ModelError::UnknownUser {
                    user: user.0,
                    n_users,
                })
            } else {
                Ok(())
            }
        };
        check_user(target)?;
        for &p in &pseudonyms {
            check_user(p)?;
        }
        for behavior in &behaviors {
            if let Recipients::Partners(set) = behavior {
                for &id in set.ids() {
                    check_user(id)?;
                }
            }
        }
        Ok(Self {
            n_users,
            behaviors,
            target,
            pseudonyms,
        })
    }

    /// Draw a population matching `config`.
    ///
    /// Draw order is fixed for reproducibility: target, pseudonym identities,
    /// then per-user partner sets (and weights, in weighted mode) for users
    /// 0..N in turn.
    pub fn generate(config: &SystemConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let n = config.n_users;
        let target = UserId(rng.random_range(0..n));
        let pseudonyms = if config.defense == Defense::Sybil {
            sample_excluding(n, config.n_pseudonyms as usize, target, rng)
        } else {
            Vec::new()
        };
        let is_pseudonym: std::collections::HashSet<UserId> = pseudonyms.iter().copied().collect();

        let mut behaviors = Vec::with_capacity(n as usize);
        for uid in 0..n {
            let user = UserId(uid);
            let behavior = if user == target {
                Recipients::Partners(draw_partner_set(
                    n,
                    config.n_partners as usize,
                    user,
                    config.weighted_recipients,
                    rng,
                )?)
            } else if is_pseudonym.contains(&user) {
                Recipients::Partners(draw_partner_set(
                    n,
                    config.pseudonym_partner_count() as usize,
                    user,
                    config.weighted_recipients,
                    rng,
                )?)
            } else {
                match config.background {
                    BackgroundModel::Uniform => Recipients::Everyone,
                    BackgroundModel::PartnerSets => Recipients::Partners(draw_partner_set(
                        n,
                        config.background_partner_count() as usize,
                        user,
                        config.weighted_recipients,
                        rng,
                    )?),
                }
            };
            behaviors.push(behavior);
        }
        Ok(Self {
            n_users: n,
            behaviors,
            target,
            pseudonyms,
        })
    }

    pub fn n_users(&self) -> u32 {
        self.n_users
    }

    pub fn target(&self) -> UserId {
        self.target
    }

    pub fn pseudonyms(&self) -> &[UserId] {
        &self.pseudonyms
    }

    pub fn recipients(&self, user: UserId) -> Result<&Recipients, ModelError> {
        self.behaviors
            .get(user.index())
            .ok_or(ModelError::UnknownUser {
                user: user.0,
                n_users: self.n_users,
            })
    }

    /// The user's partner list; for `Everyone` behavior this is every other
    /// user.
    pub fn partners(&self, user: UserId) -> Result<Vec<UserId>, ModelError> {
        match self.recipients(user)? {
            Recipients::Partners(set) => Ok(set.ids().to_vec()),
            Recipients::Everyone => Ok((0..self.n_users)
                .map(UserId)
                .filter(|&u| u != user)
                .collect()),
        }
    }

    pub fn target_partners(&self) -> Vec<UserId> {
        self.partners(self.target)
            .expect("target is always a valid user")
    }

    /// Draw one recipient for `sender` from its true distribution.
    pub fn sample_recipient(&self, sender: UserId, rng: &mut impl Rng) -> UserId {
        match &self.behaviors[sender.index()] {
            Recipients::Partners(set) => set.sample(rng),
            Recipients::Everyone => {
                debug_assert!(self.n_users >= 2);
                let r = rng.random_range(0..self.n_users - 1);
                if r >= sender.0 {
                    UserId(r + 1)
                } else {
                    UserId(r)
                }
            }
        }
    }
}

/// Sample `count` distinct users from `[0, n) \ {excluded}`.
fn sample_excluding(n: u32, count: usize, excluded: UserId, rng: &mut impl Rng) -> Vec<UserId> {
    let pool = (n - 1) as usize;
    sample_indices(rng, pool, count.min(pool))
        .into_iter()
        .map(|i| {
            let i = i as u32;
            if i >= excluded.0 {
                UserId(i + 1)
            } else {
                UserId(i)
            }
        })
        .collect()
}

fn draw_partner_set(
    n: u32,
    count: usize,
    owner: UserId,
    weighted: bool,
    rng: &mut impl Rng,
) -> Result<PartnerSet, ModelError> {
    // Partner sets exclude the owner, so a request for all N users (or a
    // single-user system) falls back to the full population, self included.
    let ids: Vec<UserId> = if count >= n as usize {
        (0..n).map(UserId).collect()
    } else {
        let mut ids = sample_excluding(n, count, owner, rng);
        ids.sort_unstable();
        ids
    };
    if weighted {
        let raw: Vec<f64> = (0..ids.len())
            .map(|_| rand_distr::Exp1.sample(rng))
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        PartnerSet::weighted(ids, weights)
    } else {
        PartnerSet::uniform(ids)
    }
}

/// The reference vector assigning every user probability 1/N.
pub fn uniform_vector(n_users: u32) -> Result<BehaviorVector, ModelError> {
    if n_users == 0 {
        return Err(ModelError::NoUsers);
    }
    let p = 1.0 / n_users as f64;
    Ok(BehaviorVector(vec![p; n_users as usize]))
}

/// Scatter a user's exact recipient distribution onto a length-N vector.
pub fn build_true_vector(truth: &GroundTruth, user: UserId) -> Result<BehaviorVector, ModelError> {
    let n = truth.n_users() as usize;
    let mut vector = BehaviorVector::zeros(n);
    match truth.recipients(user)? {
        Recipients::Partners(set) => {
            for (i, &id) in set.ids().iter().enumerate() {
                vector.as_mut_slice()[id.index()] = set.weight(i);
            }
        }
        Recipients::Everyone => {
            if n < 2 {
                return Err(ModelError::EmptyPartners);
            }
            let p = 1.0 / (n - 1) as f64;
            for (i, entry) in vector.as_mut_slice().iter_mut().enumerate() {
                if i != user.index() {
                    *entry = p;
                }
            }
        }
    }
    Ok(vector)
}

/// One round as the attacker records it: who sent and who received, with
/// message multiplicity.
///
/// For threshold-mix rounds `senders[i]` paired with `receivers[i]` is the
/// generator's private knowledge; exports sort both sides independently so
/// the pairing never leaves the simulator. Windowed rounds built from a
/// continuous-time log carry no pairing and may have differing sender and
/// receiver counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    /// 1-based position in the trace.
    pub round_index: u64,
    pub senders: Vec<UserId>,
    pub receivers: Vec<UserId>,
    /// Number of the target's messages in this round (her multiplicity in
    /// `senders`).
    pub target_count: u32,
}

impl RoundRecord {
    pub fn new(
        round_index: u64,
        senders: Vec<UserId>,
        receivers: Vec<UserId>,
        target: UserId,
    ) -> Self {
        let target_count = senders.iter().filter(|&&s| s == target).count() as u32;
        Self {
            round_index,
            senders,
            receivers,
            target_count,
        }
    }

    /// How many of `user`'s messages this round carries.
    pub fn sender_multiplicity(&self, user: UserId) -> u32 {
        self.senders.iter().filter(|&&s| s == user).count() as u32
    }

    pub fn contains_sender(&self, user: UserId) -> bool {
        self.senders.contains(&user)
    }
}
