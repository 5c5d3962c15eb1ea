use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{
    Action, ActionSpace, AdversaryAction, AgentAction, Environment, State, StateKey, StateKind,
};
use crate::error::{Error, Result};

/// Regular grid over a box. Cells are half-open except the last one per
/// dimension, which includes the upper bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub bins: Vec<usize>,
}

impl Grid {
    pub fn new(low: Vec<f64>, high: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        let g = Grid { low, high, bins };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.low.len() != self.high.len() || self.low.len() != self.bins.len() {
            return Err(Error::Usage("grid bounds and bins differ in length".into()));
        }
        for j in 0..self.low.len() {
            if !(self.low[j] < self.high[j]) || self.bins[j] == 0 {
                return Err(Error::Usage(format!("grid dimension {j} is empty")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bins.len()
    }

    pub fn cells(&self) -> usize {
        self.bins.iter().product()
    }

    fn width(&self, j: usize) -> f64 {
        (self.high[j] - self.low[j]) / self.bins[j] as f64
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j)).product()
    }

    /// Per-dimension cell indices, or `None` outside the box.
    pub fn key(&self, x: &[f64]) -> Option<Vec<i64>> {
        if x.len() != self.dim() {
            return None;
        }
        let mut out = Vec::with_capacity(x.len());
        for (j, v) in x.iter().enumerate() {
            if !(*v >= self.low[j] && *v <= self.high[j]) {
                return None;
            }
            let i = ((v - self.low[j]) / self.width(j)).floor() as i64;
            out.push(i.min(self.bins[j] as i64 - 1));
        }
        Some(out)
    }

    /// Row-major flat index of a cell key.
    pub fn flat(&self, key: &[i64]) -> usize {
        key.iter()
            .zip(&self.bins)
            .fold(0, |acc, (k, b)| acc * b + *k as usize)
    }

    pub fn unflat(&self, mut idx: usize) -> Vec<i64> {
        let mut key = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            key[j] = (idx % self.bins[j]) as i64;
            idx /= self.bins[j];
        }
        key
    }

    pub fn center(&self, key: &[i64]) -> Vec<f64> {
        key.iter()
            .enumerate()
            .map(|(j, k)| self.low[j] + (*k as f64 + 0.5) * self.width(j))
            .collect()
    }
}

/// State grid plus, for continuous adversaries, an action grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretizer {
    pub state: Grid,
    pub action: Option<Grid>,
}

type CondKey = (StateKey, i64);

/// Finite view of an environment: states keep their coordinates but are
/// keyed by state cell; adversary actions become cell indices evaluated at
/// cell centers, with midpoint mass (density x cell volume, renormalized)
/// as their probability. Masses for a conditional are computed once per
/// (state cell, agent key) at the cell's center state.
pub struct DiscretizedEnv {
    inner: Arc<dyn Environment>,
    grid: Discretizer,
    gt_cache: RwLock<HashMap<CondKey, Arc<Vec<f64>>>>,
    warm_cache: RwLock<HashMap<CondKey, Option<Arc<Vec<f64>>>>>,
    min_mass: f64,
}

pub fn discretize_env(inner: Arc<dyn Environment>, grid: Discretizer) -> Result<DiscretizedEnv> {
    grid.state.validate()?;
    if grid.state.dim() != inner.state_dim() {
        return Err(Error::Usage(format!(
            "state grid has {} dimensions, {} expects {}",
            grid.state.dim(),
            inner.name(),
            inner.state_dim()
        )));
    }
    match (&inner.adversary_space(), &grid.action) {
        (ActionSpace::Box { low, .. }, Some(g)) => {
            g.validate()?;
            if g.dim() != low.len() {
                return Err(Error::Usage("action grid dimension mismatch".into()));
            }
        }
        (ActionSpace::Box { .. }, None) => {
            return Err(Error::Usage(format!("{} needs an action grid", inner.name())));
        }
        (ActionSpace::Discrete(_), Some(_)) => {
            return Err(Error::Usage("action grid given for a discrete adversary".into()));
        }
        (ActionSpace::Discrete(_), None) => {}
    }
    let s0 = inner.initial_state();
    if grid.state.key(&s0.coords).is_none() {
        return Err(Error::Coverage(format!("initial state {:?} outside the state grid", s0.coords)));
    }
    let mut env = DiscretizedEnv {
        inner,
        grid,
        gt_cache: RwLock::new(HashMap::new()),
        warm_cache: RwLock::new(HashMap::new()),
        min_mass: 0.0,
    };
    let mut rng = crate::seeded_rng(0);
    let a0 = env.inner.agent_action(&s0, &mut rng);
    env.min_mass = env
        .gt_masses(&s0, &a0)
        .iter()
        .copied()
        .filter(|m| *m > 0.0)
        .fold(f64::INFINITY, f64::min);
    Ok(env)
}

impl DiscretizedEnv {
    pub fn inner(&self) -> &Arc<dyn Environment> {
        &self.inner
    }

    pub fn discretizer(&self) -> &Discretizer {
        &self.grid
    }

    pub fn action_count(&self) -> usize {
        match (&self.inner.adversary_space(), &self.grid.action) {
            (ActionSpace::Discrete(n), _) => *n,
            (_, Some(g)) => g.cells(),
            _ => unreachable!("validated at construction"),
        }
    }

    fn cond_key(&self, s: &State, a: &AgentAction) -> CondKey {
        (self.state_key(s), self.inner.agent_key(a))
    }

    fn center_state(&self, s: &State) -> State {
        match self.grid.state.key(&s.coords) {
            Some(k) => State::new(self.grid.state.center(&k), StateKind::Interior),
            None => s.clone(),
        }
    }

    /// Inner-environment action for discrete index `i`.
    pub fn action_value(&self, i: usize) -> AdversaryAction {
        match &self.grid.action {
            Some(g) => Action::Continuous(g.center(&g.unflat(i))),
            None => Action::Discrete(i),
        }
    }

    fn masses_with(
        &self,
        s: &State,
        a: &AgentAction,
        density: impl Fn(&State, &AgentAction, &AdversaryAction) -> Option<f64>,
    ) -> Option<Vec<f64>> {
        let rep = self.center_state(s);
        let vol = self.grid.action.as_ref().map_or(1.0, Grid::volume);
        let mut m = Vec::with_capacity(self.action_count());
        for i in 0..self.action_count() {
            m.push(density(&rep, a, &self.action_value(i))? * vol);
        }
        let z: f64 = m.iter().sum();
        if z > 0.0 {
            m.iter_mut().for_each(|x| *x /= z);
        }
        Some(m)
    }

    pub fn gt_masses(&self, s: &State, a: &AgentAction) -> Arc<Vec<f64>> {
        let key = self.cond_key(s, a);
        if let Some(m) = self.gt_cache.read().expect("cache lock").get(&key) {
            return m.clone();
        }
        let inner = &self.inner;
        let m = Arc::new(
            self.masses_with(s, a, |s, a, e| Some(inner.gt_density(s, a, e)))
                .expect("ground truth always defined"),
        );
        self.gt_cache.write().expect("cache lock").insert(key, m.clone());
        m
    }

    pub fn warm_masses(&self, s: &State, a: &AgentAction) -> Option<Arc<Vec<f64>>> {
        let key = self.cond_key(s, a);
        if let Some(m) = self.warm_cache.read().expect("cache lock").get(&key) {
            return m.clone();
        }
        let inner = &self.inner;
        let m = self
            .masses_with(s, a, |s, a, e| inner.warm_start_density(s, a, e))
            .map(Arc::new);
        self.warm_cache.write().expect("cache lock").insert(key, m.clone());
        m
    }

    fn index_of(&self, e: &AdversaryAction) -> Option<usize> {
        e.index().filter(|i| *i < self.action_count())
    }
}

impl Environment for DiscretizedEnv {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn initial_state(&self) -> State {
        self.inner.initial_state()
    }

    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }

    fn timeout_is_rare(&self) -> bool {
        self.inner.timeout_is_rare()
    }

    fn adversary_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.action_count())
    }

    fn agent_action(&self, s: &State, rng: &mut dyn RngCore) -> AgentAction {
        self.inner.agent_action(s, rng)
    }

    fn evolve(&self, s: &State, a: &AgentAction, e: &AdversaryAction) -> Result<State> {
        let i = self
            .index_of(e)
            .ok_or_else(|| Error::Domain(format!("invalid cell action {e:?}")))?;
        let next = self.inner.evolve(s, a, &self.action_value(i))?;
        if !next.is_terminal() && self.grid.state.key(&next.coords).is_none() {
            return Err(Error::Coverage(format!(
                "reachable state {:?} outside the state grid",
                next.coords
            )));
        }
        Ok(next)
    }

    fn inverse_action(&self, s: &State, a: &AgentAction, s_next: &State) -> Result<AdversaryAction> {
        let e = self.inner.inverse_action(s, a, s_next)?;
        match (&self.grid.action, &e) {
            (Some(g), Action::Continuous(v)) => {
                let k = g
                    .key(v)
                    .ok_or_else(|| Error::Unreachable(format!("action {v:?} outside the grid")))?;
                Ok(Action::Discrete(g.flat(&k)))
            }
            _ => Ok(e),
        }
    }

    fn gt_density(&self, s: &State, a: &AgentAction, e: &AdversaryAction) -> f64 {
        self.index_of(e).map_or(0.0, |i| self.gt_masses(s, a)[i])
    }

    fn sample_gt(&self, s: &State, a: &AgentAction, rng: &mut dyn RngCore) -> AdversaryAction {
        Action::Discrete(crate::env::sample_categorical(&self.gt_masses(s, a), rng))
    }

    fn warm_start_density(&self, s: &State, a: &AgentAction, e: &AdversaryAction) -> Option<f64> {
        let i = self.index_of(e)?;
        self.warm_masses(s, a).map(|m| m[i])
    }

    fn condition_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.condition_bounds()
    }

    fn min_gt_density(&self) -> f64 {
        self.min_mass
    }

    fn state_key(&self, s: &State) -> StateKey {
        match self.grid.state.key(&s.coords) {
            Some(k) => StateKey(k),
            // terminal states may lie outside the grid; they never index tables
            None => StateKey(s.coords.iter().map(|_| -1).collect()),
        }
    }
}
