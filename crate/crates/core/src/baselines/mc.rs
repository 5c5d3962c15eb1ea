use crate::env::{sample_transition, Environment, GroundTruthSampler};
use crate::error::{Error, Result};
use crate::report::{EstimatorReport, ReportSink};
use crate::seeded_rng;

/// Vanilla Monte Carlo: the fraction of rare episodes under the ground
/// truth. The running estimate is streamed once per transition and moves
/// only at episode ends.
pub fn mc_estimate(
    env: &dyn Environment,
    budget_episodes: u64,
    seed: u64,
    mut sink: ReportSink,
) -> Result<EstimatorReport> {
    if budget_episodes == 0 {
        return Err(Error::Usage("mc needs at least one episode".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut rare = 0u64;
    let mut step = 0u64;
    for ep in 1..=budget_episodes {
        let mut s = env.initial_state();
        let mut t = 0;
        loop {
            let rec = sample_transition(env, &GroundTruthSampler, &s, t, &mut rng)?;
            step += 1;
            if rec.done {
                let hit = rec.reward > 0.0;
                rare += hit as u64;
                sink.end_episode(hit);
                sink.record(step, rare as f64 / ep as f64);
                break;
            }
            let done_eps = ep - 1;
            let est = if done_eps == 0 { 0.0 } else { rare as f64 / done_eps as f64 };
            sink.record(step, est);
            s = rec.s_next;
            t += 1;
        }
    }
    Ok(sink.finish())
}
