//! Environment abstraction with the adversary factorization.
//!
//! Every stochastic transition is written as a deterministic evolution map
//! driven by an environment-adversary action: `s' = f_E(s, a_A, a_E)` with
//! `a_E ~ pi_E(. | a_A, s)`. Changing the distribution of `a_E` is the only
//! lever the estimators pull; the ratio of ground-truth to proposal density
//! of the taken `a_E` is the one-step importance weight.

mod gamblers;
mod gridworld;
mod intersection;
mod lander;
mod truncnorm;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SimRng;

pub use gamblers::GamblersRuin;
pub use gridworld::GridworldLava;
pub use intersection::Intersection2d;
pub use lander::Lander1d;
pub use truncnorm::TruncatedNormalBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateKind {
    Interior,
    RareTerminal,
    SafeTerminal,
}

impl StateKind {
    pub fn is_terminal(self) -> bool {
        !matches!(self, StateKind::Interior)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub coords: Vec<f64>,
    pub kind: StateKind,
}

impl State {
    pub fn new(coords: Vec<f64>, kind: StateKind) -> Self {
        State { coords, kind }
    }

    pub fn is_terminal(&self) -> bool {
        self.kind.is_terminal()
    }

    pub fn is_rare(&self) -> bool {
        self.kind == StateKind::RareTerminal
    }
}

/// Action of either player. Discrete environments use indices, continuous
/// ones real vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

pub type AgentAction = Action;
pub type AdversaryAction = Action;

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_slice(&self) -> Option<&[f64]> {
        match self {
            Action::Discrete(_) => None,
            Action::Continuous(v) => Some(v),
        }
    }

    /// Real-valued view used to build flow conditions.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Action::Discrete(i) => vec![*i as f64],
            Action::Continuous(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn contains(&self, a: &Action) -> bool {
        match (self, a) {
            (ActionSpace::Discrete(n), Action::Discrete(i)) => i < n,
            (ActionSpace::Box { low, high }, Action::Continuous(v)) => {
                v.len() == low.len()
                    && v
                        .iter()
                        .zip(low.iter().zip(high))
                        .all(|(x, (lo, hi))| x.is_finite() && *x >= *lo && *x <= *hi)
            }
            _ => false,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }
}

/// Table key for a state; discrete environments round their integer
/// coordinates, discretized views use cell indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey(pub Vec<i64>);

/// A Markov decision process with a scripted agent and a factorized
/// environment adversary.
pub trait Environment: Send + Sync {
    fn name(&self) -> String;

    fn state_dim(&self) -> usize;

    fn initial_state(&self) -> State;

    /// Episode step cap `T_max`.
    fn max_steps(&self) -> usize;

    /// Whether hitting the step cap counts as a rare event.
    fn timeout_is_rare(&self) -> bool {
        false
    }

    fn adversary_space(&self) -> ActionSpace;

    fn agent_action(&self, s: &State, rng: &mut dyn RngCore) -> AgentAction;

    /// Deterministic evolution map `f_E`. Callers go through [`step`], which
    /// validates inputs first.
    fn evolve(&self, s: &State, a_agent: &AgentAction, a_adv: &AdversaryAction) -> Result<State>;

    /// Inverse evolution map `f_E^{-1}`.
    fn inverse_action(
        &self,
        s: &State,
        a_agent: &AgentAction,
        s_next: &State,
    ) -> Result<AdversaryAction>;

    /// Ground-truth adversary density (probability mass for discrete spaces).
    fn gt_density(&self, s: &State, a_agent: &AgentAction, a_adv: &AdversaryAction) -> f64;

    fn sample_gt(&self, s: &State, a_agent: &AgentAction, rng: &mut dyn RngCore) -> AdversaryAction;

    /// Warm-start proposal density, when the environment defines one.
    fn warm_start_density(
        &self,
        _s: &State,
        _a_agent: &AgentAction,
        _a_adv: &AdversaryAction,
    ) -> Option<f64> {
        None
    }

    /// Per-dimension std of a continuous ground-truth adversary.
    fn adversary_std(&self) -> Option<Vec<f64>> {
        None
    }

    /// Bounds of the flow condition `[a_A, s]`, used for min-max scaling.
    fn condition_bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Minimum ground-truth density over the adversary support.
    fn min_gt_density(&self) -> f64;

    fn state_key(&self, s: &State) -> StateKey {
        StateKey(s.coords.iter().map(|c| c.round() as i64).collect())
    }

    fn agent_key(&self, a: &AgentAction) -> i64 {
        match a {
            Action::Discrete(i) => *i as i64,
            Action::Continuous(_) => 0,
        }
    }
}

/// Environments whose reachable state set can be enumerated, with an
/// explicit agent action distribution and a discrete adversary.
pub trait FiniteEnvironment: Environment {
    /// All states, interior and terminal.
    fn states(&self) -> Vec<State>;

    fn agent_distribution(&self, s: &State) -> Vec<(AgentAction, f64)>;

    fn adversary_count(&self) -> usize {
        match self.adversary_space() {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Box { .. } => 0,
        }
    }
}

/// Reward indicator `r(s, s') = 1{s' in R}`.
pub fn reward(s_next: &State) -> f64 {
    if s_next.is_rare() {
        1.0
    } else {
        0.0
    }
}

/// One validated environment step: `(f_E(s, a_A, a_E), r(s, s'))`.
pub fn step(
    env: &dyn Environment,
    s: &State,
    a_agent: &AgentAction,
    a_adv: &AdversaryAction,
) -> Result<(State, f64)> {
    if s.is_terminal() {
        return Err(Error::Usage(format!(
            "step called from terminal state {:?}",
            s.coords
        )));
    }
    if !env.adversary_space().contains(a_adv) {
        return Err(Error::Domain(format!(
            "adversary action {a_adv:?} outside {:?}",
            env.adversary_space()
        )));
    }
    let next = env.evolve(s, a_agent, a_adv)?;
    let r = reward(&next);
    Ok((next, r))
}

/// One-step importance weight `pi_gt(a_E | a_A, s) / q(a_E | a_A, s)`.
pub fn importance_weight(
    env: &dyn Environment,
    sampler_density: f64,
    s: &State,
    a_agent: &AgentAction,
    a_adv: &AdversaryAction,
) -> Result<f64> {
    weight_from_densities(env.gt_density(s, a_agent, a_adv), sampler_density)
}

pub fn weight_from_densities(gt_density: f64, sampler_density: f64) -> Result<f64> {
    if !(sampler_density > 0.0) || !sampler_density.is_finite() {
        return Err(Error::DegenerateSampler {
            density: sampler_density,
            context: format!("ground-truth density {gt_density}"),
        });
    }
    Ok(gt_density / sampler_density)
}

/// Proposal distribution over adversary actions.
pub trait AdversarySampler {
    /// Draws `a_E` and returns it with its density under this sampler.
    fn sample(
        &self,
        env: &dyn Environment,
        s: &State,
        a_agent: &AgentAction,
        rng: &mut dyn RngCore,
    ) -> Result<(AdversaryAction, f64)>;

    fn density(
        &self,
        env: &dyn Environment,
        s: &State,
        a_agent: &AgentAction,
        a_adv: &AdversaryAction,
    ) -> Result<f64>;
}

/// Samples from the environment's own adversary distribution.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthSampler;

impl AdversarySampler for GroundTruthSampler {
    fn sample(
        &self,
        env: &dyn Environment,
        s: &State,
        a_agent: &AgentAction,
        rng: &mut dyn RngCore,
    ) -> Result<(AdversaryAction, f64)> {
        let a = env.sample_gt(s, a_agent, rng);
        let d = env.gt_density(s, a_agent, &a);
        Ok((a, d))
    }

    fn density(
        &self,
        env: &dyn Environment,
        s: &State,
        a_agent: &AgentAction,
        a_adv: &AdversaryAction,
    ) -> Result<f64> {
        Ok(env.gt_density(s, a_agent, a_adv))
    }
}

/// Samples a discrete adversary action from explicit probabilities.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    use rand::Rng;
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p / total;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// One step's data pair `(s, a_A, a_E, s', r, rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub s: State,
    pub a_agent: AgentAction,
    pub a_adv: AdversaryAction,
    pub s_next: State,
    pub reward: f64,
    pub rho: f64,
    /// Density of `a_adv` under the proposal that drew it.
    pub sampler_density: f64,
    /// `s_next` ends the episode (terminal state or step cap).
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub records: Vec<TransitionRecord>,
    /// Ended in a terminal state (as opposed to the step cap).
    pub terminated: bool,
}

impl Trajectory {
    pub fn tau(&self) -> usize {
        self.records.len()
    }

    /// Trajectory likelihood ratio `prod rho`.
    pub fn likelihood_ratio(&self) -> f64 {
        self.records.iter().map(|r| r.rho).product()
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn is_rare(&self) -> bool {
        self.total_reward() > 0.0
    }

    /// Per-trajectory importance-sampling estimate `(prod rho) (sum r)`.
    pub fn is_estimate(&self) -> f64 {
        let r = self.total_reward();
        if r == 0.0 {
            0.0
        } else {
            self.likelihood_ratio() * r
        }
    }
}

/// Samples one transition from `s` at episode step `t` (0-based) under
/// `sampler`, applying the step cap.
pub fn sample_transition(
    env: &dyn Environment,
    sampler: &dyn AdversarySampler,
    s: &State,
    t: usize,
    rng: &mut dyn RngCore,
) -> Result<TransitionRecord> {
    let a_agent = env.agent_action(s, rng);
    let (a_adv, q) = sampler.sample(env, s, &a_agent, rng)?;
    let rho = importance_weight(env, q, s, &a_agent, &a_adv)?;
    let (s_next, r) = step(env, s, &a_agent, &a_adv)?;
    Ok(finish_record(env, s.clone(), a_agent, a_adv, s_next, r, rho, q, t))
}

/// Assembles a record, applying the step-cap rule for `done` and the
/// timeout reward.
#[allow(clippy::too_many_arguments)]
pub fn finish_record(
    env: &dyn Environment,
    s: State,
    a_agent: AgentAction,
    a_adv: AdversaryAction,
    s_next: State,
    mut r: f64,
    rho: f64,
    q: f64,
    t: usize,
) -> TransitionRecord {
    let capped = t + 1 >= env.max_steps() && !s_next.is_terminal();
    if capped && env.timeout_is_rare() {
        r = 1.0;
    }
    TransitionRecord {
        done: s_next.is_terminal() || capped,
        s,
        a_agent,
        a_adv,
        s_next,
        reward: r,
        rho,
        sampler_density: q,
    }
}

/// Rolls out one episode from the initial state under `sampler`.
pub fn rollout(
    env: &dyn Environment,
    sampler: &dyn AdversarySampler,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    let mut s = env.initial_state();
    if s.is_terminal() {
        return Err(Error::Usage("initial state must be interior".into()));
    }
    let mut traj = Trajectory::default();
    for t in 0..env.max_steps() {
        let rec = sample_transition(env, sampler, &s, t, rng)?;
        let done = rec.done;
        traj.terminated = rec.s_next.is_terminal();
        s = rec.s_next.clone();
        traj.records.push(rec);
        if done {
            break;
        }
    }
    Ok(traj)
}

pub fn rollout_seeded(
    env: &dyn Environment,
    sampler: &dyn AdversarySampler,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = crate::seeded_rng(seed);
    rollout(env, sampler, &mut rng as &mut SimRng)
}

/// Names of the built-in environments.
pub const BUILTIN_ENVS: [&str; 4] = ["gamblers-ruin", "gridworld-lava", "intersection-2d", "lander-1d"];
