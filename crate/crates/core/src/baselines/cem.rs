use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{sample_transition, Environment, StateKey, Trajectory};
use crate::error::{Error, Result};
use crate::report::{EstimatorReport, ReportSink};
use crate::seeded_rng;
use crate::tabular::TabularAdversary;

/// Likelihood ratio, rare flag and visit counts of one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub likelihood: f64,
    pub rare: bool,
    /// Per `(state key, agent key)`: visit count of each adversary action.
    pub counts: HashMap<(StateKey, i64), Vec<u64>>,
}

impl EpisodeSummary {
    pub fn from_trajectory(env: &dyn Environment, traj: &Trajectory, actions: usize) -> Result<Self> {
        let mut counts: HashMap<(StateKey, i64), Vec<u64>> = HashMap::new();
        for rec in &traj.records {
            let i = rec
                .a_adv
                .index()
                .filter(|i| *i < actions)
                .ok_or_else(|| Error::Usage("cem needs discrete adversary actions".into()))?;
            let key = (env.state_key(&rec.s), env.agent_key(&rec.a_agent));
            counts.entry(key).or_insert_with(|| vec![0; actions])[i] += 1;
        }
        Ok(EpisodeSummary {
            likelihood: traj.likelihood_ratio(),
            rare: traj.is_rare(),
            counts,
        })
    }

    pub fn weighted(&self) -> f64 {
        if self.rare {
            self.likelihood
        } else {
            0.0
        }
    }
}

/// One cross-entropy step. Returns the batch estimate `mean(L I)`; every
/// conditional visited by a rare episode is replaced by its clipped,
/// renormalized likelihood-weighted visit frequency. Other conditionals
/// are left alone.
pub fn cem_update(batch: &[EpisodeSummary], pi: &mut TabularAdversary, delta_cem: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("cem batch is empty".into()));
    }
    let estimate = batch.iter().map(EpisodeSummary::weighted).sum::<f64>() / batch.len() as f64;
    let mut numer: HashMap<&(StateKey, i64), Vec<f64>> = HashMap::new();
    for ep in batch.iter().filter(|e| e.rare && e.likelihood > 0.0) {
        for (key, c) in &ep.counts {
            let acc = numer.entry(key).or_insert_with(|| vec![0.0; c.len()]);
            for (a, n) in acc.iter_mut().zip(c) {
                *a += ep.likelihood * *n as f64;
            }
        }
    }
    for (key, acc) in numer {
        let denom: f64 = acc.iter().sum();
        if denom > 0.0 {
            let p: Vec<f64> = acc.iter().map(|x| (x / denom).max(delta_cem)).collect();
            pi.set_conditional(key.clone(), p);
        }
    }
    Ok(estimate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    /// Episodes per batch.
    pub batch: usize,
    /// Probability floor; `None` means 1e-3 of the uniform mass.
    pub delta: Option<f64>,
    pub budget_steps: u64,
    pub warm_start: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            batch: 50,
            delta: None,
            budget_steps: 100_000,
            warm_start: false,
        }
    }
}

/// Batched cross-entropy baseline on a discrete-adversary environment. The
/// streamed estimate is the running mean of `L I` over every completed
/// episode; all batches are unbiased for the same target. The last batch
/// estimate is kept as a diagnostic.
pub fn run_cem(env: &dyn Environment, cfg: &CemConfig, seed: u64, mut sink: ReportSink) -> Result<EstimatorReport> {
    if cfg.batch == 0 {
        return Err(Error::Usage("cem batch size must be positive".into()));
    }
    let actions = match env.adversary_space() {
        crate::env::ActionSpace::Discrete(n) => n,
        _ => return Err(Error::Usage(format!("{} needs a discretized adversary for cem", env.name()))),
    };
    let delta = cfg.delta.unwrap_or(1e-3 / actions as f64);
    let mut pi = TabularAdversary::new(env, delta, cfg.warm_start)?;
    let mut rng = seeded_rng(seed);
    let mut step = 0u64;
    let mut sum_weighted = 0.0;
    let mut completed = 0u64;
    let mut batch = Vec::with_capacity(cfg.batch);
    let mut last_batch = f64::NAN;
    'outer: while step < cfg.budget_steps {
        let mut traj = Trajectory::default();
        let mut s = env.initial_state();
        for t in 0..env.max_steps() {
            if step >= cfg.budget_steps {
                break 'outer;
            }
            let rec = sample_transition(env, &pi, &s, t, &mut rng)?;
            step += 1;
            let done = rec.done;
            s = rec.s_next.clone();
            traj.terminated = s.is_terminal();
            traj.records.push(rec);
            if done {
                break;
            }
            sink.record(step, running(sum_weighted, completed));
        }
        let summary = EpisodeSummary::from_trajectory(env, &traj, actions)?;
        sink.end_episode(summary.rare);
        batch.push(summary);
        if batch.len() == cfg.batch {
            last_batch = cem_update(&batch, &mut pi, delta)?;
            sum_weighted += batch.iter().map(EpisodeSummary::weighted).sum::<f64>();
            completed += batch.len() as u64;
            batch.clear();
        }
        sink.record(step, running(sum_weighted, completed));
    }
    sink.diagnostic("last_batch_estimate", last_batch);
    sink.diagnostic("delta", delta);
    Ok(sink.finish())
}

fn running(sum: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
