//! Episodic MDPs: the maximization-bias chain and cliff walking.
//!
//! Environments are stateless; the caller owns the current [`State`] and can
//! start a step from any valid state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MevError, Result};
use crate::rng::SimRng;

/// Index of a state; [`State::TERMINAL`] marks the end of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State(pub usize);

impl State {
    pub const TERMINAL: State = State(usize::MAX);

    pub fn is_terminal(self) -> bool {
        self == Self::TERMINAL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send + Sync {
    /// Number of non-terminal state indices.
    fn state_count(&self) -> usize;

    /// Largest action count over all states.
    fn max_action_count(&self) -> usize;

    fn action_count(&self, state: State) -> usize;

    fn reset(&self, rng: &mut SimRng) -> State;

    fn step(&self, state: State, action: usize, rng: &mut SimRng) -> Result<StepResult>;

    /// Whether an agent can occupy `state`.
    fn is_valid_state(&self, state: State) -> bool {
        state.0 < self.state_count()
    }

    /// Returns `state` if an episode may continue from it.
    fn set_state(&self, state: State) -> Result<State> {
        if state.is_terminal() {
            Err(MevError::TerminalStep)
        } else if self.is_valid_state(state) {
            Ok(state)
        } else {
            Err(crate::error::invalid(format!("state {} is not reachable", state.0)))
        }
    }
}

/// One-hot encoding over the state indices.
pub fn encode_features<E: Environment + ?Sized>(env: &E, state: State) -> Result<Vec<f64>> {
    if state.is_terminal() {
        return Err(MevError::TerminalStep);
    }
    if state.0 >= env.state_count() {
        return Err(crate::error::invalid(format!("state {} out of range", state.0)));
    }
    let mut v = vec![0.0; env.state_count()];
    v[state.0] = 1.0;
    Ok(v)
}

fn check_action(action: usize, count: usize) -> Result<()> {
    if action < count {
        Ok(())
    } else {
        Err(MevError::InvalidAction { action, count })
    }
}

/// Two-state chain: from A, `right` ends the episode and `left` leads to B;
/// every action in B ends the episode with reward ~ N(−0.1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxBiasMdp {
    pub b_actions: usize,
    pub b_reward_mean: f64,
    pub b_reward_sd: f64,
}

impl Default for MaxBiasMdp {
    fn default() -> Self {
        Self { b_actions: 8, b_reward_mean: -0.1, b_reward_sd: 1.0 }
    }
}

impl MaxBiasMdp {
    pub const A: State = State(0);
    pub const B: State = State(1);
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    pub fn validate(&self) -> Result<()> {
        if self.b_actions == 0 {
            return Err(invalid("b_actions must be positive"));
        }
        if !(self.b_reward_mean.is_finite() && self.b_reward_sd.is_finite() && self.b_reward_sd >= 0.0) {
            return Err(invalid("B rewards need a finite mean and a non-negative standard deviation"));
        }
        Ok(())
    }
}

impl Environment for MaxBiasMdp {
    fn state_count(&self) -> usize {
        2
    }

    fn max_action_count(&self) -> usize {
        self.b_actions.max(2)
    }

    fn action_count(&self, state: State) -> usize {
        match state {
            Self::A => 2,
            Self::B => self.b_actions,
            _ => 0,
        }
    }

    fn reset(&self, _rng: &mut SimRng) -> State {
        Self::A
    }

    fn step(&self, state: State, action: usize, rng: &mut SimRng) -> Result<StepResult> {
        match state {
            Self::A => {
                check_action(action, 2)?;
                Ok(if action == Self::LEFT {
                    StepResult { next_state: Self::B, reward: 0.0, done: false }
                } else {
                    StepResult { next_state: State::TERMINAL, reward: 0.0, done: true }
                })
            }
            Self::B => {
                check_action(action, self.b_actions)?;
                let z: f64 = rng.sample(StandardNormal);
                Ok(StepResult {
                    next_state: State::TERMINAL,
                    reward: self.b_reward_mean + self.b_reward_sd * z,
                    done: true,
                })
            }
            s if s.is_terminal() => Err(MevError::TerminalStep),
            s => Err(crate::error::invalid(format!("state {} out of range", s.0))),
        }
    }
}

/// Cliff walking on a `width` × `height` grid. Cells are indexed
/// `y * width + x` with y = 0 the bottom row; S is (0, 0) and G is (width−1, 0).
/// Entering a bottom-row cell between them costs −100 and returns the agent
/// to S without ending the episode; every other move costs −1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CliffWalking {
    pub width: usize,
    pub height: usize,
}

impl Default for CliffWalking {
    fn default() -> Self {
        Self { width: 10, height: 5 }
    }
}

impl CliffWalking {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;
    pub const CLIFF_REWARD: f64 = -100.0;
    pub const STEP_REWARD: f64 = -1.0;

    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 2 {
            return Err(invalid("the cliff grid needs width >= 3 and height >= 2"));
        }
        Ok(())
    }

    pub fn start(&self) -> State {
        State(0)
    }

    pub fn goal(&self) -> State {
        State(self.width - 1)
    }

    pub fn cell(&self, x: usize, y: usize) -> State {
        State(y * self.width + x)
    }

    pub fn coords(&self, s: State) -> (usize, usize) {
        (s.0 % self.width, s.0 / self.width)
    }

    pub fn is_cliff(&self, s: State) -> bool {
        let (x, y) = self.coords(s);
        y == 0 && x > 0 && x + 1 < self.width
    }

    /// Length of the shortest path from S to G.
    pub fn optimal_return(&self) -> f64 {
        -((self.width + 1) as f64)
    }
}

impl Environment for CliffWalking {
    fn state_count(&self) -> usize {
        self.width * self.height
    }

    fn max_action_count(&self) -> usize {
        4
    }

    fn action_count(&self, state: State) -> usize {
        if self.is_valid_state(state) {
            4
        } else {
            0
        }
    }

    fn is_valid_state(&self, state: State) -> bool {
        state.0 < self.state_count() && !self.is_cliff(state) && state != self.goal()
    }

    fn reset(&self, _rng: &mut SimRng) -> State {
        self.start()
    }

    fn step(&self, state: State, action: usize, _rng: &mut SimRng) -> Result<StepResult> {
        if state.is_terminal() {
            return Err(MevError::TerminalStep);
        }
        if !self.is_valid_state(state) {
            return Err(crate::error::invalid(format!("state {} is not reachable", state.0)));
        }
        check_action(action, 4)?;
        let (x, y) = self.coords(state);
        let (nx, ny) = match action {
            Self::UP => (x, (y + 1).min(self.height - 1)),
            Self::DOWN => (x, y.saturating_sub(1)),
            Self::LEFT => (x.saturating_sub(1), y),
            _ => ((x + 1).min(self.width - 1), y),
        };
        let next = self.cell(nx, ny);
        Ok(if self.is_cliff(next) {
            StepResult { next_state: self.start(), reward: Self::CLIFF_REWARD, done: false }
        } else if next == self.goal() {
            StepResult { next_state: State::TERMINAL, reward: Self::STEP_REWARD, done: true }
        } else {
            StepResult { next_state: next, reward: Self::STEP_REWARD, done: false }
        })
    }
}
