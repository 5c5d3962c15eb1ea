//! Tabular accelerated policy evaluation: a TD(0) value table driven by
//! importance-weighted targets, with the adversary table pulled toward the
//! zero-variance proposal after every step.

use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{
    finish_record, importance_weight, sample_categorical, step, Action, ActionSpace,
    AdversaryAction, AdversarySampler, AgentAction, Environment, State, StateKey,
    TransitionRecord,
};
use crate::error::{Error, Result};
use crate::report::{EstimatorReport, ReportSink};
use crate::{seeded_rng, SimRng};

/// Floor on `v(s)` before it is used as a divisor.
pub const VALUE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSchedule {
    pub alpha0: f64,
    pub tau: f64,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        LearningSchedule {
            alpha0: 0.1,
            tau: 1e4,
        }
    }
}

impl LearningSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(Error::Usage(format!("alpha0 must lie in (0, 1], got {}", self.alpha0)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Usage(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Step size for update number `n` (0-based).
    pub fn alpha(&self, n: u64) -> f64 {
        self.alpha0 / (1.0 + n as f64 / self.tau)
    }
}

/// Value estimates per state key. Unseen and terminal states read 0.
#[derive(Clone, Debug, Default)]
pub struct TabularValue {
    table: HashMap<StateKey, f64>,
}

impl TabularValue {
    pub fn get(&self, env: &dyn Environment, s: &State) -> f64 {
        if s.is_terminal() {
            0.0
        } else {
            self.table.get(&env.state_key(s)).copied().unwrap_or(0.0)
        }
    }

    pub fn set(&mut self, env: &dyn Environment, s: &State, v: f64) {
        self.table.insert(env.state_key(s), v);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Importance-weighted TD target `(r + v(s')) * rho`.
pub fn td_target(v: &TabularValue, env: &dyn Environment, rec: &TransitionRecord) -> f64 {
    let tail = if rec.done { 0.0 } else { v.get(env, &rec.s_next) };
    (rec.reward + tail) * rec.rho
}

/// `v(s) <- (1 - alpha) v(s) + alpha (r + v(s')) rho`. Returns the new
/// entry.
pub fn td_update_value(
    v: &mut TabularValue,
    env: &dyn Environment,
    rec: &TransitionRecord,
    alpha: f64,
) -> f64 {
    let old = v.get(env, &rec.s);
    let new = (1.0 - alpha) * old + alpha * td_target(v, env, rec);
    v.set(env, &rec.s, new);
    new
}

/// Discrete adversary proposal. Each `(state key, agent key)` conditional
/// stores unnormalized masses, normalized on use. Conditionals are created
/// lazily from the ground truth (or the environment's warm start) on first
/// use.
#[derive(Clone, Debug)]
pub struct TabularAdversary {
    table: HashMap<(StateKey, i64), Vec<f64>>,
    actions: usize,
    delta: f64,
    warm_start: bool,
    max_normalizer: f64,
}

impl TabularAdversary {
    pub fn new(env: &dyn Environment, delta: f64, warm_start: bool) -> Result<Self> {
        let actions = match env.adversary_space() {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Box { .. } => {
                return Err(Error::Usage(format!(
                    "{} has a continuous adversary; discretize it first",
                    env.name()
                )))
            }
        };
        if !(delta > 0.0) {
            return Err(Error::Usage(format!("delta must be positive, got {delta}")));
        }
        Ok(TabularAdversary {
            table: HashMap::new(),
            actions,
            delta,
            warm_start,
            max_normalizer: 1.0,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Largest mass total seen across conditionals.
    pub fn max_normalizer(&self) -> f64 {
        self.max_normalizer
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn key(env: &dyn Environment, s: &State, a: &AgentAction) -> (StateKey, i64) {
        (env.state_key(s), env.agent_key(a))
    }

    fn initial(&self, env: &dyn Environment, s: &State, a: &AgentAction) -> Vec<f64> {
        let mut p: Vec<f64> = (0..self.actions)
            .map(|i| {
                let e = Action::Discrete(i);
                let gt = env.gt_density(s, a, &e);
                if self.warm_start {
                    env.warm_start_density(s, a, &e).unwrap_or(gt)
                } else {
                    gt
                }
            })
            .collect();
        normalize(&mut p);
        p
    }

    /// Normalized conditional for `(s, a)`.
    pub fn probabilities(&self, env: &dyn Environment, s: &State, a: &AgentAction) -> Vec<f64> {
        match self.table.get(&Self::key(env, s, a)) {
            Some(m) => {
                let mut p = m.clone();
                normalize(&mut p);
                p
            }
            None => self.initial(env, s, a),
        }
    }

    /// Sets one action's unnormalized mass to `max(delta, mass)`, keeping
    /// the other masses. Returns the normalized conditional.
    pub fn set_mass(
        &mut self,
        env: &dyn Environment,
        s: &State,
        a: &AgentAction,
        action: usize,
        mass: f64,
    ) -> Vec<f64> {
        let key = Self::key(env, s, a);
        let init = || self.initial(env, s, a);
        let mut m = self.table.get(&key).cloned().unwrap_or_else(init);
        m[action] = mass.max(self.delta);
        let z: f64 = m.iter().sum();
        self.max_normalizer = self.max_normalizer.max(z);
        self.table.insert(key, m.clone());
        m.iter_mut().for_each(|x| *x /= z);
        m
    }

    /// Replaces a whole conditional with `masses`.
    pub fn set_conditional(&mut self, key: (StateKey, i64), masses: Vec<f64>) {
        debug_assert_eq!(masses.len(), self.actions);
        let z: f64 = masses.iter().sum();
        self.max_normalizer = self.max_normalizer.max(z);
        self.table.insert(key, masses);
    }
}

fn normalize(p: &mut [f64]) {
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
}

impl AdversarySampler for TabularAdversary {
    fn sample(
        &self,
        env: &dyn Environment,
        s: &State,
        a: &AgentAction,
        rng: &mut dyn RngCore,
    ) -> Result<(AdversaryAction, f64)> {
        let p = self.probabilities(env, s, a);
        let i = sample_categorical(&p, rng);
        Ok((Action::Discrete(i), p[i]))
    }

    fn density(
        &self,
        env: &dyn Environment,
        s: &State,
        a: &AgentAction,
        e: &AdversaryAction,
    ) -> Result<f64> {
        let p = self.probabilities(env, s, a);
        Ok(e.index().and_then(|i| p.get(i).copied()).unwrap_or(0.0))
    }
}

/// Retargets the taken action's mass to
/// `max(delta, explore * pi_gt, pi_gt (r + v(s')) / max(v(s), VALUE_FLOOR))`
/// and renormalizes. `explore = 0` gives the bare plug-in rule.
pub fn update_adversary(
    pi: &mut TabularAdversary,
    env: &dyn Environment,
    rec: &TransitionRecord,
    v: &TabularValue,
    explore: f64,
) -> Result<Vec<f64>> {
    let i = rec
        .a_adv
        .index()
        .ok_or_else(|| Error::Usage("tabular adversary needs a discrete action".into()))?;
    let gt = env.gt_density(&rec.s, &rec.a_agent, &rec.a_adv);
    let tail = if rec.done { 0.0 } else { v.get(env, &rec.s_next) };
    let denom = v.get(env, &rec.s).max(VALUE_FLOOR);
    let mass = (gt * (rec.reward + tail) / denom).max(explore * gt);
    Ok(pi.set_mass(env, &rec.s, &rec.a_agent, i, mass))
}

/// Relative mass floor `scale / (1 + n / tau) * pi_gt(a)` at update `n`.
/// Early on it keeps unexplored actions near their ground-truth mass; it
/// fades so the table can still approach the zero-variance proposal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationFloor {
    pub scale: f64,
    pub tau: f64,
}

impl Default for ExplorationFloor {
    fn default() -> Self {
        ExplorationFloor { scale: 1.0, tau: 300.0 }
    }
}

impl ExplorationFloor {
    pub const OFF: ExplorationFloor = ExplorationFloor { scale: 0.0, tau: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) || !(self.tau > 0.0) {
            return Err(Error::Usage(format!(
                "exploration floor needs scale >= 0 and tau > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn at(&self, n: u64) -> f64 {
        self.scale / (1.0 + n as f64 / self.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub schedule: LearningSchedule,
    pub exploration: ExplorationFloor,
    /// Mass floor; `None` means 0.1 x the smallest ground-truth mass.
    pub delta: Option<f64>,
    pub budget_steps: u64,
    pub warm_start: bool,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            schedule: LearningSchedule::default(),
            exploration: ExplorationFloor::default(),
            delta: None,
            budget_steps: 100_000,
            warm_start: false,
        }
    }
}

impl TabularConfig {
    pub fn resolved_delta(&self, env: &dyn Environment) -> f64 {
        self.delta.unwrap_or(0.1 * env.min_gt_density())
    }
}

/// Outcome of one learner step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: TransitionRecord,
    pub td_target: f64,
    /// `v(s0)` after the update.
    pub estimate: f64,
}

enum Proposal<'a> {
    Adaptive,
    Frozen(&'a dyn AdversarySampler),
}

/// Online learner state. [`run_tabular_ape`] drives it with the adaptive
/// proposal; tests can freeze the proposal at a fixed sampler.
pub struct TabularApe<'a> {
    env: &'a dyn Environment,
    pub value: TabularValue,
    pub adversary: TabularAdversary,
    schedule: LearningSchedule,
    exploration: ExplorationFloor,
    proposal: Proposal<'a>,
    rng: SimRng,
    state: State,
    t: usize,
    episode_reward: f64,
    steps: u64,
    max_rho: f64,
    max_gt: f64,
}

impl<'a> TabularApe<'a> {
    pub fn new(env: &'a dyn Environment, cfg: &TabularConfig, seed: u64) -> Result<Self> {
        cfg.schedule.validate()?;
        cfg.exploration.validate()?;
        let adversary = TabularAdversary::new(env, cfg.resolved_delta(env), cfg.warm_start)?;
        let state = env.initial_state();
        if state.is_terminal() {
            return Err(Error::Usage("initial state must be interior".into()));
        }
        Ok(TabularApe {
            env,
            value: TabularValue::default(),
            adversary,
            schedule: cfg.schedule,
            exploration: cfg.exploration,
            proposal: Proposal::Adaptive,
            rng: seeded_rng(seed),
            state,
            t: 0,
            episode_reward: 0.0,
            steps: 0,
            max_rho: 0.0,
            max_gt: 0.0,
        })
    }

    /// Samples from `sampler` and leaves the adversary table untouched.
    pub fn frozen(mut self, sampler: &'a dyn AdversarySampler) -> Self {
        self.proposal = Proposal::Frozen(sampler);
        self
    }

    pub fn estimate(&self) -> f64 {
        self.value.get(self.env, &self.env.initial_state())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn max_rho(&self) -> f64 {
        self.max_rho
    }

    /// Upper bound on any weight drawn from the adaptive table:
    /// `max pi_gt / (delta / Z_max)`.
    pub fn rho_bound(&self) -> f64 {
        self.max_gt * self.adversary.max_normalizer() / self.adversary.delta()
    }

    /// One transition: sample, step, weight, value update, then policy
    /// update with the new value. Returns the record; `record.done` marks
    /// an episode boundary (the learner has already reset).
    pub fn step(&mut self) -> Result<StepOutcome> {
        let env = self.env;
        let s = self.state.clone();
        let a = env.agent_action(&s, &mut self.rng);
        let (e, q) = match self.proposal {
            Proposal::Adaptive => self.adversary.sample(env, &s, &a, &mut self.rng)?,
            Proposal::Frozen(p) => p.sample(env, &s, &a, &mut self.rng)?,
        };
        let rho = importance_weight(env, q, &s, &a, &e)?;
        self.max_rho = self.max_rho.max(rho);
        self.max_gt = self.max_gt.max(env.gt_density(&s, &a, &e));
        let (s_next, r) = step(env, &s, &a, &e)?;
        let rec = finish_record(env, s, a, e, s_next, r, rho, q, self.t);

        let target = td_target(&self.value, env, &rec);
        td_update_value(&mut self.value, env, &rec, self.schedule.alpha(self.steps));
        if matches!(self.proposal, Proposal::Adaptive) {
            let explore = self.exploration.at(self.steps);
            update_adversary(&mut self.adversary, env, &rec, &self.value, explore)?;
        }
        self.steps += 1;
        self.episode_reward += rec.reward;
        if rec.done {
            self.state = env.initial_state();
            self.t = 0;
        } else {
            self.state = rec.s_next.clone();
            self.t += 1;
        }
        Ok(StepOutcome {
            record: rec,
            td_target: target,
            estimate: self.estimate(),
        })
    }

    /// Reward collected so far in the current episode; reset by the caller
    /// through [`take_episode_reward`](Self::take_episode_reward).
    pub fn take_episode_reward(&mut self) -> f64 {
        std::mem::take(&mut self.episode_reward)
    }
}

/// Runs tabular APE for `cfg.budget_steps` transitions, streaming
/// `v(s0)` into `sink`.
pub fn run_tabular_ape(
    env: &dyn Environment,
    cfg: &TabularConfig,
    seed: u64,
    mut sink: ReportSink,
) -> Result<EstimatorReport> {
    let mut ape = TabularApe::new(env, cfg, seed)?;
    for n in 1..=cfg.budget_steps {
        let out = ape.step()?;
        if out.record.done {
            let r = ape.take_episode_reward();
            sink.end_episode(r > 0.0);
        }
        sink.record(n, out.estimate);
    }
    sink.diagnostic("rho_max", ape.max_rho());
    sink.diagnostic("rho_bound", ape.rho_bound());
    sink.diagnostic("delta", ape.adversary.delta());
    Ok(sink.finish())
}
