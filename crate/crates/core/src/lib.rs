//! Rare-event policy evaluation.
//!
//! Estimates the probability that a fixed agent policy ends an episode in a
//! rare terminal set by learning an adversarial proposal over the
//! environment's own randomness (adaptive importance sampling) while
//! bootstrapping the value estimate online.

pub mod baselines;
pub mod env;
pub mod error;
pub mod flow;
pub mod gp;
pub mod harness;
pub mod oracle;
pub mod report;
pub mod scalable;
pub mod tabular;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Random stream used by every rollout; seeded runs are bit-reproducible.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
