use rand::RngCore;

use super::{
    Action, ActionSpace, AdversaryAction, AgentAction, Environment, State, StateKind,
    TruncatedNormalBox,
};
use crate::error::{Error, Result};

/// Two-vehicle unprotected-turn analog in relative coordinates.
///
/// The state is the challenger's position `(x_rel, y_rel)` in the agent's
/// frame. The agent crosses at constant speed (its action is that speed);
/// the challenger approaches along `x`. The adversary action `a_E in R^2`
/// perturbs the challenger's velocity:
///
/// ```text
/// x' = x - (v_c + k_x a_E[0])
/// y' = y - v_A + k_y a_E[1]
/// ```
///
/// A collision (`|s| < radius`) is the rare event. Leaving the scene
/// (`y < -0.5`, `x < -0.5`, or outside `[-1, 1]^2`) is safe.
#[derive(Clone, Debug, PartialEq)]
pub struct Intersection2d {
    start: [f64; 2],
    agent_speed: f64,
    challenger_speed: f64,
    gain: [f64; 2],
    radius: f64,
    gt: TruncatedNormalBox,
    warm: Option<TruncatedNormalBox>,
    max_steps: usize,
    hard: bool,
}

const EXIT: f64 = -0.5;

impl Intersection2d {
    pub fn new(start: [f64; 2], gt_std: f64) -> Result<Self> {
        if start.iter().any(|c| !(c.abs() <= 1.0)) {
            return Err(Error::Domain(format!("start {start:?} outside [-1, 1]^2")));
        }
        if !(gt_std > 0.0) {
            return Err(Error::Domain(format!("gt std must be positive, got {gt_std}")));
        }
        let gt = TruncatedNormalBox::new(vec![0.0; 2], vec![gt_std; 2], vec![-2.0; 2], vec![2.0; 2]);
        let env = Intersection2d {
            start,
            agent_speed: 0.05,
            challenger_speed: 0.05,
            gain: [0.08, 0.04],
            radius: 0.15,
            gt,
            warm: None,
            max_steps: 40,
            hard: false,
        };
        if env.kind(&start) != StateKind::Interior {
            return Err(Error::Domain(format!("start {start:?} is terminal")));
        }
        Ok(env)
    }

    /// Rare-event probability around 6e-2.
    pub fn easy() -> Self {
        Intersection2d::new([0.85, 0.4], 0.5).expect("valid preset")
    }

    /// Rare-event probability around 1e-5; carries a warm-start proposal.
    pub fn hard() -> Self {
        Intersection2d::new([0.85, 0.4], 0.19)
            .expect("valid preset")
            .with_warm_start(2.0, 0.1)
    }

    /// Attaches a warm-start proposal: ground truth with std inflated by
    /// `inflate` and mean shifted by `shift` toward faster, closer
    /// challenger motion. Marks the instance as hard.
    pub fn with_warm_start(mut self, inflate: f64, shift: f64) -> Self {
        self.warm = Some(self.gt.skewed(inflate, shift, &self.adversarial_direction()));
        self.hard = true;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps.max(1);
        self
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    /// Speeding the challenger up and holding it back laterally both close
    /// the miss distance.
    pub fn adversarial_direction(&self) -> Vec<f64> {
        vec![1.0, 1.0]
    }

    pub fn gt_distribution(&self) -> &TruncatedNormalBox {
        &self.gt
    }

    pub fn warm_distribution(&self) -> Option<&TruncatedNormalBox> {
        self.warm.as_ref()
    }

    fn kind(&self, p: &[f64; 2]) -> StateKind {
        let [x, y] = *p;
        if x * x + y * y < self.radius * self.radius {
            StateKind::RareTerminal
        } else if y < EXIT || x < EXIT || x.abs() > 1.0 || y.abs() > 1.0 {
            StateKind::SafeTerminal
        } else {
            StateKind::Interior
        }
    }

    pub fn state(&self, x: f64, y: f64) -> State {
        State::new(vec![x, y], self.kind(&[x, y]))
    }

    fn agent_speed_of(&self, a: &AgentAction) -> Result<f64> {
        match a {
            Action::Continuous(v) if v.len() == 1 => Ok(v[0]),
            other => Err(Error::Domain(format!("invalid agent action {other:?}"))),
        }
    }

    fn coords(s: &State) -> Result<[f64; 2]> {
        match s.coords.as_slice() {
            [x, y] => Ok([*x, *y]),
            other => Err(Error::Domain(format!("not an intersection state: {other:?}"))),
        }
    }
}

impl Environment for Intersection2d {
    fn name(&self) -> String {
        "intersection-2d".into()
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn initial_state(&self) -> State {
        self.state(self.start[0], self.start[1])
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn adversary_space(&self) -> ActionSpace {
        ActionSpace::Box {
            low: self.gt.low().to_vec(),
            high: self.gt.high().to_vec(),
        }
    }

    fn agent_action(&self, _s: &State, _rng: &mut dyn RngCore) -> AgentAction {
        Action::Continuous(vec![self.agent_speed])
    }

    fn evolve(&self, s: &State, a: &AgentAction, a_adv: &AdversaryAction) -> Result<State> {
        let [x, y] = Self::coords(s)?;
        let speed = self.agent_speed_of(a)?;
        let e = a_adv
            .as_slice()
            .ok_or_else(|| Error::Domain("intersection needs a continuous action".into()))?;
        let nx = x - (self.challenger_speed + self.gain[0] * e[0]);
        let ny = y - speed + self.gain[1] * e[1];
        Ok(self.state(nx, ny))
    }

    fn inverse_action(&self, s: &State, a: &AgentAction, s_next: &State) -> Result<AdversaryAction> {
        let [x, y] = Self::coords(s)?;
        let [nx, ny] = Self::coords(s_next)?;
        let speed = self.agent_speed_of(a)?;
        let e0 = (x - nx - self.challenger_speed) / self.gain[0];
        let e1 = (ny - y + speed) / self.gain[1];
        let tol = 1e-9;
        let (lo, hi) = (self.gt.low(), self.gt.high());
        if e0 < lo[0] - tol || e0 > hi[0] + tol || e1 < lo[1] - tol || e1 > hi[1] + tol {
            return Err(Error::Unreachable(format!("{:?} -> {:?}", s.coords, s_next.coords)));
        }
        Ok(Action::Continuous(vec![
            e0.clamp(lo[0], hi[0]),
            e1.clamp(lo[1], hi[1]),
        ]))
    }

    fn gt_density(&self, _s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> f64 {
        a_adv.as_slice().map_or(0.0, |v| self.gt.density(v))
    }

    fn sample_gt(&self, _s: &State, _a: &AgentAction, rng: &mut dyn RngCore) -> AdversaryAction {
        Action::Continuous(self.gt.sample(rng))
    }

    fn warm_start_density(&self, _s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> Option<f64> {
        let w = self.warm.as_ref()?;
        a_adv.as_slice().map(|v| w.density(v))
    }

    fn adversary_std(&self) -> Option<Vec<f64>> {
        Some(self.gt.std().to_vec())
    }

    fn condition_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, -1.0, -1.0], vec![2.0 * self.agent_speed, 1.0, 1.0])
    }

    fn min_gt_density(&self) -> f64 {
        self.gt.min_density()
    }
}
