use rand::{Rng, RngCore};

use super::{
    Action, ActionSpace, AdversaryAction, AgentAction, Environment, FiniteEnvironment, State,
    StateKind,
};
use crate::error::{Error, Result};

const DOWN: usize = 0;
const UP: usize = 1;

/// Gambler's ruin on `{0, ..., N}`: the adversary moves the walker up with
/// probability `p`. Reaching `N` is the rare event, reaching `0` is safe.
#[derive(Clone, Debug, PartialEq)]
pub struct GamblersRuin {
    n: usize,
    p: f64,
    start: usize,
    max_steps: usize,
}

impl GamblersRuin {
    pub fn new(n: usize, p: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("gamblers-ruin needs N >= 2, got {n}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("gamblers-ruin needs 0 < p < 1, got {p}")));
        }
        Ok(GamblersRuin {
            n,
            p,
            start: 1,
            max_steps: 10 * n,
        })
    }

    pub fn with_start(mut self, start: usize) -> Result<Self> {
        if start == 0 || start >= self.n {
            return Err(Error::Usage(format!("start {start} is not interior")));
        }
        self.start = start;
        Ok(self)
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps.max(1);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn state(&self, i: usize) -> State {
        let kind = if i == self.n {
            StateKind::RareTerminal
        } else if i == 0 {
            StateKind::SafeTerminal
        } else {
            StateKind::Interior
        };
        State::new(vec![i as f64], kind)
    }

    /// Closed-form probability of reaching `N` before `0` from `i`.
    pub fn closed_form(&self, i: usize) -> f64 {
        let q = 1.0 - self.p;
        if (self.p - q).abs() < 1e-15 {
            return i as f64 / self.n as f64;
        }
        let ratio = q / self.p;
        (ratio.powi(i as i32) - 1.0) / (ratio.powi(self.n as i32) - 1.0)
    }

    fn position(&self, s: &State) -> Result<usize> {
        let x = s.coords.first().copied().unwrap_or(f64::NAN);
        if x.fract() != 0.0 || x < 0.0 || x > self.n as f64 {
            return Err(Error::Domain(format!("not a gamblers-ruin state: {:?}", s.coords)));
        }
        Ok(x as usize)
    }
}

impl Environment for GamblersRuin {
    fn name(&self) -> String {
        "gamblers-ruin".into()
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> State {
        self.state(self.start)
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn adversary_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn agent_action(&self, _s: &State, _rng: &mut dyn RngCore) -> AgentAction {
        Action::Discrete(0)
    }

    fn evolve(&self, s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> Result<State> {
        let i = self.position(s)?;
        match a_adv {
            Action::Discrete(UP) => Ok(self.state(i + 1)),
            Action::Discrete(DOWN) => Ok(self.state(i - 1)),
            other => Err(Error::Domain(format!("invalid gamblers-ruin action {other:?}"))),
        }
    }

    fn inverse_action(&self, s: &State, _a: &AgentAction, s_next: &State) -> Result<AdversaryAction> {
        let i = self.position(s)? as i64;
        let j = self.position(s_next)? as i64;
        match j - i {
            1 => Ok(Action::Discrete(UP)),
            -1 => Ok(Action::Discrete(DOWN)),
            _ => Err(Error::Unreachable(format!("{i} -> {j}"))),
        }
    }

    fn gt_density(&self, _s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> f64 {
        match a_adv {
            Action::Discrete(UP) => self.p,
            Action::Discrete(DOWN) => 1.0 - self.p,
            _ => 0.0,
        }
    }

    fn sample_gt(&self, _s: &State, _a: &AgentAction, rng: &mut dyn RngCore) -> AdversaryAction {
        let u: f64 = rng.random();
        Action::Discrete(if u < self.p { UP } else { DOWN })
    }

    fn condition_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![0.0, self.n as f64])
    }

    fn min_gt_density(&self) -> f64 {
        self.p.min(1.0 - self.p)
    }
}

impl FiniteEnvironment for GamblersRuin {
    fn states(&self) -> Vec<State> {
        (0..=self.n).map(|i| self.state(i)).collect()
    }

    fn agent_distribution(&self, _s: &State) -> Vec<(AgentAction, f64)> {
        vec![(Action::Discrete(0), 1.0)]
    }
}
