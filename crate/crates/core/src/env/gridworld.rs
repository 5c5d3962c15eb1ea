use rand::RngCore;

use super::{
    sample_categorical, Action, ActionSpace, AdversaryAction, AgentAction, Environment,
    FiniteEnvironment, State, StateKind,
};
use crate::error::{Error, Result};

pub const LAVA_LEFT: usize = 0;
pub const LAVA_RIGHT: usize = 1;
pub const LAVA_UP: usize = 2;

/// Minigrid-style corridor with a moving lava cell.
///
/// The agent walks the top row from column 0 to the goal at column
/// `width - 1`, one cell per step. The lava sits in the row below and moves
/// left or right on a ring, or surges up in place. A surge under the cell
/// the agent just entered is the rare event; a surge elsewhere recedes.
///
/// State coordinates are `(agent_col, lava_row, lava_col)` with
/// `lava_row = 0` only in the rare terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct GridworldLava {
    width: usize,
    lava_start: usize,
    probs: [f64; 3],
    max_steps: usize,
}

impl GridworldLava {
    pub fn new(width: usize, lava_start: usize) -> Result<Self> {
        if width < 3 {
            return Err(Error::Domain(format!("gridworld width must be >= 3, got {width}")));
        }
        if lava_start >= width {
            return Err(Error::Domain(format!(
                "lava start {lava_start} outside width {width}"
            )));
        }
        Ok(GridworldLava {
            width,
            lava_start,
            probs: [0.495, 0.495, 0.01],
            max_steps: 100,
        })
    }

    /// Default instance: width 7, lava starting under the agent's column.
    pub fn standard() -> Self {
        GridworldLava::new(7, 0).expect("valid preset")
    }

    pub fn with_probs(mut self, probs: [f64; 3]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("lava probabilities {probs:?} invalid")));
        }
        self.probs = probs;
        Ok(self)
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps.max(1);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> [f64; 3] {
        self.probs
    }

    pub fn state(&self, agent: usize, lava_row: usize, lava: usize) -> State {
        let kind = if lava_row == 0 {
            StateKind::RareTerminal
        } else if agent == self.width - 1 {
            StateKind::SafeTerminal
        } else {
            StateKind::Interior
        };
        State::new(vec![agent as f64, lava_row as f64, lava as f64], kind)
    }

    fn decode(&self, s: &State) -> Result<(usize, usize, usize)> {
        let ok = s.coords.len() == 3
            && s.coords.iter().all(|c| c.fract() == 0.0 && *c >= 0.0)
            && (s.coords[0] as usize) < self.width
            && (s.coords[1] as usize) <= 1
            && (s.coords[2] as usize) < self.width;
        if !ok {
            return Err(Error::Domain(format!("not a gridworld state: {:?}", s.coords)));
        }
        Ok((s.coords[0] as usize, s.coords[1] as usize, s.coords[2] as usize))
    }
}

impl Environment for GridworldLava {
    fn name(&self) -> String {
        "gridworld-lava".into()
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn initial_state(&self) -> State {
        self.state(0, 1, self.lava_start)
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn adversary_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    /// Scripted shortest path: always step toward the goal.
    fn agent_action(&self, _s: &State, _rng: &mut dyn RngCore) -> AgentAction {
        Action::Discrete(0)
    }

    fn evolve(&self, s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> Result<State> {
        let (agent, _, lava) = self.decode(s)?;
        let next_agent = agent + 1;
        let w = self.width;
        match a_adv {
            Action::Discrete(LAVA_LEFT) => Ok(self.state(next_agent, 1, (lava + w - 1) % w)),
            Action::Discrete(LAVA_RIGHT) => Ok(self.state(next_agent, 1, (lava + 1) % w)),
            Action::Discrete(LAVA_UP) if lava == next_agent => Ok(self.state(next_agent, 0, lava)),
            Action::Discrete(LAVA_UP) => Ok(self.state(next_agent, 1, lava)),
            other => Err(Error::Domain(format!("invalid lava action {other:?}"))),
        }
    }

    fn inverse_action(&self, s: &State, _a: &AgentAction, s_next: &State) -> Result<AdversaryAction> {
        let (agent, _, lava) = self.decode(s)?;
        let (next_agent, row, next_lava) = self.decode(s_next)?;
        let w = self.width;
        if next_agent != agent + 1 {
            return Err(Error::Unreachable(format!("agent {agent} -> {next_agent}")));
        }
        if row == 0 {
            return if next_lava == lava && lava == next_agent {
                Ok(Action::Discrete(LAVA_UP))
            } else {
                Err(Error::Unreachable("surge away from the agent".into()))
            };
        }
        if next_lava == lava && lava != next_agent {
            Ok(Action::Discrete(LAVA_UP))
        } else if next_lava == (lava + w - 1) % w {
            Ok(Action::Discrete(LAVA_LEFT))
        } else if next_lava == (lava + 1) % w {
            Ok(Action::Discrete(LAVA_RIGHT))
        } else {
            Err(Error::Unreachable(format!("lava {lava} -> {next_lava}")))
        }
    }

    fn gt_density(&self, _s: &State, _a: &AgentAction, a_adv: &AdversaryAction) -> f64 {
        match a_adv {
            Action::Discrete(i) if *i < 3 => self.probs[*i],
            _ => 0.0,
        }
    }

    fn sample_gt(&self, _s: &State, _a: &AgentAction, rng: &mut dyn RngCore) -> AdversaryAction {
        Action::Discrete(sample_categorical(&self.probs, rng))
    }

    fn condition_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let w = (self.width - 1) as f64;
        (vec![0.0, 0.0, 0.0, 0.0], vec![0.0, w, 1.0, w])
    }

    fn min_gt_density(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl FiniteEnvironment for GridworldLava {
    fn states(&self) -> Vec<State> {
        let mut out = Vec::new();
        for agent in 0..self.width {
            for lava in 0..self.width {
                out.push(self.state(agent, 1, lava));
            }
        }
        for agent in 1..self.width {
            out.push(self.state(agent, 0, agent));
        }
        out
    }

    fn agent_distribution(&self, _s: &State) -> Vec<(AgentAction, f64)> {
        vec![(Action::Discrete(0), 1.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::step;

    #[test]
    fn reaching_goal_without_surge_is_safe() {
        let env = GridworldLava::standard();
        let s = env.state(5, 1, 3);
        let (next, r) = step(&env, &s, &Action::Discrete(0), &Action::Discrete(LAVA_UP)).unwrap();
        assert_eq!(next.kind, StateKind::SafeTerminal);
        assert_eq!(next.coords, vec![6.0, 1.0, 3.0]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn surge_under_agent_is_rare() {
        let env = GridworldLava::standard();
        let s = env.state(3, 1, 4);
        let (next, r) = step(&env, &s, &Action::Discrete(0), &Action::Discrete(LAVA_UP)).unwrap();
        assert!(next.is_rare());
        assert_eq!(r, 1.0);
        assert_eq!(
            env.inverse_action(&s, &Action::Discrete(0), &next).unwrap(),
            Action::Discrete(LAVA_UP)
        );
    }

    #[test]
    fn lava_wraps_around_the_ring() {
        let env = GridworldLava::new(5, 0).unwrap();
        let s = env.initial_state();
        let a = Action::Discrete(0);
        let (left, _) = step(&env, &s, &a, &Action::Discrete(LAVA_LEFT)).unwrap();
        assert_eq!(left.coords[2], 4.0);
        assert_eq!(env.inverse_action(&s, &a, &left).unwrap(), Action::Discrete(LAVA_LEFT));
    }
}
