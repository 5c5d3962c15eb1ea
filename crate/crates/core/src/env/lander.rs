use rand::RngCore;

use super::{
    Action, ActionSpace, AdversaryAction, AgentAction, Environment, State, StateKind,
    TruncatedNormalBox,
};
use crate::error::{Error, Result};

/// Vertical lander with a PD descent controller.
///
/// State `(h, v)`: height above the pad and vertical speed. One environment
/// step is a block of `substeps` Euler substeps during which the adversary's
/// action noise is held constant and added to the commanded acceleration.
/// The agent action is the command at the start of the block; the
/// controller recomputes it on every later substep.
///
/// Rare events: touchdown faster than `crash_speed`, drifting above
/// `max_height`, or running out of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Lander1d {
    start: [f64; 2],
    dt: f64,
    substeps: usize,
    kd: f64,
    kh: f64,
    crash_speed: f64,
    max_height: f64,
    noise: TruncatedNormalBox,
    max_steps: usize,
}

impl Default for Lander1d {
    fn default() -> Self {
        Lander1d {
            start: [1.0, 0.0],
            dt: 0.05,
            substeps: 10,
            kd: 2.0,
            kh: 0.5,
            crash_speed: 0.26,
            max_height: 2.0,
            noise: TruncatedNormalBox::new(vec![0.0], vec![0.1], vec![-1.0], vec![1.0]),
            max_steps: 200,
        }
    }
}

impl Lander1d {
    pub fn new(crash_speed: f64, noise_std: f64) -> Result<Self> {
        if !(crash_speed > 0.0) || !(noise_std > 0.0) {
            return Err(Error::Domain("lander parameters must be positive".into()));
        }
        Ok(Lander1d {
            crash_speed,
            noise: TruncatedNormalBox::new(vec![0.0], vec![noise_std], vec![-1.0], vec![1.0]),
            ..Lander1d::default()
        })
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps.max(1);
        self
    }

    fn kind(&self, h: f64, v: f64) -> StateKind {
        if h > self.max_height || (h <= 0.0 && v < -self.crash_speed) {
            StateKind::RareTerminal
        } else if h <= 0.0 {
            StateKind::SafeTerminal
        } else {
            StateKind::Interior
        }
    }

    pub fn state(&self, h: f64, v: f64) -> State {
        State::new(vec![h, v], self.kind(h, v))
    }

    fn command(&self, h: f64, v: f64) -> f64 {
        let v_ref = -0.1 - self.kh * h;
        self.kd * (v_ref - v)
    }

    fn integrate(&self, h: f64, v: f64, first_command: f64, noise: f64) -> (f64, f64) {
        let (mut h, mut v) = (h, v);
        for k in 0..self.substeps {
            let u = if k == 0 { first_command } else { self.command(h, v) };
            let acc = u + noise;
            h += self.dt * v;
            v += self.dt * acc;
        }
        (h, v)
    }

    fn coords(s: &State) -> Result<(f64, f64)> {
        match s.coords.as_slice() {
            [h, v] => Ok((*h, *v)),
            other => Err(Error::Domain(format!("not a lander state: {other:?}"))),
        }
    }

    fn command_of(a: &AgentAction) -> Result<f64> {
        match a {
            Action::Continuous(v) if v.len() == 1 => Ok(v[0]),
            other => Err(Error::Domain(format!("invalid agent action {other:?}"))),
        }
    }
}

impl Environment for Lander1d {
    fn name(&self) -> String {
        "lander-1d".into()
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

    fn timeout_is_rare(&self) -> bool {
        true
    }

    fn adversary_space(&self) -> ActionSpace {
        ActionSpace::Box {
            low: self.noise.low().to_vec(),
            high: self.noise.high().to_vec(),
        }
    }

    fn agent_action(&self, s: &State, _rng: &mut dyn RngCore) -> AgentAction {
        let (h, v) = Self::coords(s).unwrap_or((0.0, 0.0));
        Action::Continuous(vec![self.command(h, v)])
    }

    fn evolve(&self, s: &State, a: &AgentAction, a_adv: &AdversaryAction) -> Result<State> {
        let (h, v) = Self::coords(s)?;
        let u = Self::command_of(a)?;
        let e = a_adv
            .as_slice()
            .ok_or_else(|| Error::Domain("lander needs a continuous action".into()))?[0];
        let (nh, nv) = self.integrate(h, v, u, e);
        Ok(self.state(nh, nv))
    }

    /// The block map is affine in the held noise, so two probes recover it.
    fn inverse_action(&self, s: &State, a: &AgentAction, s_next: &State) -> Result<AdversaryAction> {
        let (h, v) = Self::coords(s)?;
        let (nh, nv) = Self::coords(s_next)?;
        let u = Self::command_of(a)?;
        let base = self.integrate(h, v, u, 0.0);
        let unit = self.integrate(h, v, u, 1.0);
        let w = (unit.0 - base.0, unit.1 - base.1);
        let d = (nh - base.0, nv - base.1);
        let e = (d.0 * w.0 + d.1 * w.1) / (w.0 * w.0 + w.1 * w.1);
        let resid = ((d.0 - e * w.0).powi(2) + (d.1 - e * w.1).powi(2)).sqrt();
        if resid > 1e-9 || e.abs() > 1.0 + 1e-9 {
            return Err(Error::Unreachable(format!("{:?} -> {:?}", s.coords, s_next.coords)));
        }
        Ok(Action::Continuous(vec![e.clamp(-1.0, 1.0)]))
    }

    fn gt_density(&self, _s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> f64 {
        a_adv.as_slice().map_or(0.0, |v| self.noise.density(v))
    }

    fn sample_gt(&self, _s: &State, _a: &AgentAction, rng: &mut dyn RngCore) -> AdversaryAction {
        Action::Continuous(self.noise.sample(rng))
    }

    fn adversary_std(&self) -> Option<Vec<f64>> {
        Some(self.noise.std().to_vec())
    }

    fn condition_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-4.0, 0.0, -2.0], vec![4.0, self.max_height, 1.0])
    }

    fn min_gt_density(&self) -> f64 {
        self.noise.min_density()
    }
}
