//! Reference estimators: plain Monte Carlo, the batched cross-entropy
//! method, and the grid discretizer that lets tabular methods run on
//! continuous environments.

mod cem;
mod discretize;
mod mc;

pub use cem::{cem_update, run_cem, CemConfig, EpisodeSummary};
pub use discretize::{discretize_env, DiscretizedEnv, Discretizer, Grid};
pub use mc::mc_estimate;
