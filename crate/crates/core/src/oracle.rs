//! Exact ground truth for finite environments: linear Bellman solve,
//! finite-horizon recursion, exhaustive trajectory enumeration and the
//! zero-variance proposal built from exact values.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::env::{
    reward, sample_categorical, Action, AdversaryAction, AdversarySampler, AgentAction,
    Environment, FiniteEnvironment, State, StateKey,
};
use crate::error::{Error, Result};

/// State values keyed by [`StateKey`]; missing keys (terminals) read as 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValueTable {
    values: HashMap<StateKey, f64>,
}

impl ValueTable {
    pub fn get(&self, key: &StateKey) -> f64 {
        self.values.get(key).copied().unwrap_or(0.0)
    }

    pub fn value(&self, env: &dyn Environment, s: &State) -> f64 {
        if s.is_terminal() {
            0.0
        } else {
            self.get(&env.state_key(s))
        }
    }

    pub fn insert(&mut self, key: StateKey, v: f64) {
        self.values.insert(key, v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One weighted edge of the composed chain `pi_A x pi_gt`.
struct Edge {
    prob: f64,
    next: State,
}

fn edges(env: &dyn FiniteEnvironment, s: &State) -> Result<Vec<Edge>> {
    let mut out = Vec::new();
    for (a, pa) in env.agent_distribution(s) {
        for i in 0..env.adversary_count() {
            let e = Action::Discrete(i);
            let pe = env.gt_density(s, &a, &e);
            if pa * pe > 0.0 {
                out.push(Edge {
                    prob: pa * pe,
                    next: env.evolve(s, &a, &e)?,
                });
            }
        }
    }
    Ok(out)
}

/// Solves `v = P_II v + b` on the interior block, ignoring the step cap.
pub fn exact_value_oracle(env: &dyn FiniteEnvironment) -> Result<ValueTable> {
    let interior: Vec<State> = env.states().into_iter().filter(|s| !s.is_terminal()).collect();
    let index: HashMap<StateKey, usize> = interior
        .iter()
        .enumerate()
        .map(|(i, s)| (env.state_key(s), i))
        .collect();
    let n = interior.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    // reverse adjacency, for the absorption check
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut exits = vec![false; n];
    for (i, s) in interior.iter().enumerate() {
        for edge in edges(env, s)? {
            if edge.next.is_terminal() {
                b[i] += edge.prob * reward(&edge.next);
                exits[i] = true;
            } else {
                let j = *index.get(&env.state_key(&edge.next)).ok_or_else(|| {
                    Error::OracleUnsolvable(format!("successor {:?} not enumerated", edge.next.coords))
                })?;
                a[(i, j)] -= edge.prob;
                preds[j].push(i);
            }
        }
    }
    let mut absorbed = exits.clone();
    let mut queue: VecDeque<usize> = (0..n).filter(|i| exits[*i]).collect();
    while let Some(j) = queue.pop_front() {
        for &i in &preds[j] {
            if !absorbed[i] {
                absorbed[i] = true;
                queue.push_back(i);
            }
        }
    }
    if let Some(i) = absorbed.iter().position(|x| !x) {
        return Err(Error::OracleUnsolvable(format!(
            "interior state {:?} never reaches a terminal",
            interior[i].coords
        )));
    }
    let v = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::OracleUnsolvable("singular Bellman system".into()))?;
    let mut table = ValueTable::default();
    for (s, val) in interior.iter().zip(v.iter()) {
        table.insert(env.state_key(s), *val);
    }
    Ok(table)
}

/// `max_s |v(s) - (T v)(s)|` over interior states.
pub fn bellman_residual(env: &dyn FiniteEnvironment, values: &ValueTable) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in env.states().iter().filter(|s| !s.is_terminal()) {
        let tv: f64 = edges(env, s)?
            .iter()
            .map(|e| e.prob * (reward(&e.next) + values.value(env, &e.next)))
            .sum();
        worst = worst.max((values.value(env, s) - tv).abs());
    }
    Ok(worst)
}

/// Probability of a rare terminal within `horizon` steps, by backward
/// recursion over steps-to-go. Honors the environment's timeout rule.
pub fn finite_horizon_value(env: &dyn FiniteEnvironment, horizon: usize) -> Result<ValueTable> {
    let interior: Vec<State> = env.states().into_iter().filter(|s| !s.is_terminal()).collect();
    let all_edges: Vec<Vec<Edge>> = interior.iter().map(|s| edges(env, s)).collect::<Result<_>>()?;
    let timeout = if env.timeout_is_rare() { 1.0 } else { 0.0 };
    let mut current = ValueTable::default();
    for k in 1..=horizon {
        let mut next = ValueTable::default();
        for (s, es) in interior.iter().zip(&all_edges) {
            let v: f64 = es
                .iter()
                .map(|e| {
                    let tail = if e.next.is_terminal() {
                        0.0
                    } else if k == 1 {
                        timeout
                    } else {
                        current.value(env, &e.next)
                    };
                    e.prob * (reward(&e.next) + tail)
                })
                .sum();
            next.insert(env.state_key(s), v);
        }
        current = next;
    }
    Ok(current)
}

/// Exhaustively enumerates every trajectory from the initial state up to the
/// step cap and returns `sum_traj q(traj) (prod rho) (sum r)`, with `q` the
/// path probability under `pi_A` and `sampler`.
pub fn enumerate_is_expectation(
    env: &dyn FiniteEnvironment,
    sampler: &dyn AdversarySampler,
) -> Result<f64> {
    fn recurse(
        env: &dyn FiniteEnvironment,
        sampler: &dyn AdversarySampler,
        s: &State,
        t: usize,
        q_path: f64,
        ratio: f64,
        rewards: f64,
        total: &mut f64,
    ) -> Result<()> {
        for (a, pa) in env.agent_distribution(s) {
            for i in 0..env.adversary_count() {
                let e = Action::Discrete(i);
                let q = sampler.density(env, s, &a, &e)?;
                if q <= 0.0 || pa <= 0.0 {
                    continue;
                }
                let rho = crate::env::importance_weight(env, q, s, &a, &e)?;
                let next = env.evolve(s, &a, &e)?;
                let mut r = rewards + reward(&next);
                let capped = t + 1 >= env.max_steps() && !next.is_terminal();
                if capped && env.timeout_is_rare() {
                    r += 1.0;
                }
                let (qp, lr) = (q_path * pa * q, ratio * rho);
                if next.is_terminal() || capped {
                    *total += qp * lr * r;
                } else {
                    recurse(env, sampler, &next, t + 1, qp, lr, r, total)?;
                }
            }
        }
        Ok(())
    }
    let mut total = 0.0;
    recurse(env, sampler, &env.initial_state(), 0, 1.0, 1.0, 0.0, &mut total)?;
    Ok(total)
}

/// The zero-variance proposal `p*(a_E | s, a_A) ∝ pi_gt(a_E) (r + v*(s'))`,
/// normalized per `(s, a_A)`. Intended for tests and diagnostics.
pub struct ZeroVarianceSampler<'a> {
    env: &'a dyn FiniteEnvironment,
    values: &'a ValueTable,
}

pub fn zero_variance_sampler<'a>(
    env: &'a dyn FiniteEnvironment,
    values: &'a ValueTable,
) -> ZeroVarianceSampler<'a> {
    ZeroVarianceSampler { env, values }
}

impl ZeroVarianceSampler<'_> {
    pub fn probabilities(&self, s: &State, a: &AgentAction) -> Result<Vec<f64>> {
        let n = self.env.adversary_count();
        let mut masses = Vec::with_capacity(n);
        for i in 0..n {
            let e = Action::Discrete(i);
            let p = self.env.gt_density(s, a, &e);
            let m = if p > 0.0 {
                let next = self.env.evolve(s, a, &e)?;
                p * (reward(&next) + self.values.value(self.env, &next))
            } else {
                0.0
            };
            masses.push(m);
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::UndefinedConditional(format!(
                "v* vanishes at {:?}",
                s.coords
            )));
        }
        Ok(masses.into_iter().map(|m| m / total).collect())
    }
}

impl AdversarySampler for ZeroVarianceSampler<'_> {
    fn sample(
        &self,
        _env: &dyn Environment,
        s: &State,
        a: &AgentAction,
        rng: &mut dyn RngCore,
    ) -> Result<(AdversaryAction, f64)> {
        let probs = self.probabilities(s, a)?;
        let i = sample_categorical(&probs, rng);
        Ok((Action::Discrete(i), probs[i]))
    }

    fn density(
        &self,
        _env: &dyn Environment,
        s: &State,
        a: &AgentAction,
        e: &AdversaryAction,
    ) -> Result<f64> {
        let probs = self.probabilities(s, a)?;
        Ok(e.index().and_then(|i| probs.get(i).copied()).unwrap_or(0.0))
    }
}
