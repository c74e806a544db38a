//! A traffic-analysis laboratory for mix networks.
//!
//! The crate simulates two anonymity systems over a synthetic population —
//! a threshold mix flushing fixed-size batches ([`roundsim`]) and a
//! continuous-time stop-and-go mix modeled as an M/M/∞ queue ([`sgmix`]) —
//! and mounts statistical disclosure attacks against a chosen target user
//! ([`attacks`]): the classic estimator that averages per-round observation
//! vectors, and an improved variant that models the background with the
//! target's cloak users. A sybil-style pseudonym defense can be switched on
//! at generation time, and [`harness`] sweeps parameter grids over repeated
//! seeded trials, emitting CSV results.
//!
//! Everything is deterministic given explicit seeds; no call path touches
//! wall-clock entropy.

pub mod attacks;
pub mod core;
pub mod harness;
pub mod roundsim;
pub mod sgmix;

pub use crate::attacks::{
    evaluate_success, improved_sda, rank_partners, required_observations, standard_sda, AttackKind,
    AttackOutcome, AttackParams, TargetEstimate,
};
pub use crate::core::{
    build_true_vector, uniform_vector, BackgroundModel, BehaviorVector, Defense, GroundTruth,
    RoundRecord, SystemConfig, UserId,
};
pub use crate::harness::{run_sweep, summarize, ExperimentGrid, ResultRow, SummaryRow};
pub use crate::roundsim::{generate_round, generate_trace, RoundStream, Trace};
pub use crate::sgmix::{simulate_sgmix, virtualize_rounds, DelayModel, EventLog, MixEvent};
