use rand::Rng;

use crate::env::State;
use crate::error::{invalid, MevError, Result};

/// Fixed-capacity ring of transitions with per-head bootstrap masks.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    min_fill: usize,
    obs_dim: usize,
    heads: usize,
    len: usize,
    next: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    states: Vec<State>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    masks: Vec<bool>,
}

/// Borrowed view of one stored transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRef<'a> {
    pub obs: &'a [f64],
    pub state: State,
    pub action: usize,
    pub reward: f64,
    pub next_obs: &'a [f64],
    pub done: bool,
    pub mask: &'a [bool],
}

impl ReplayBuffer {
    pub fn new(capacity: usize, min_fill: usize, obs_dim: usize, heads: usize) -> Result<Self> {
        if capacity == 0 || heads == 0 || obs_dim == 0 {
            return Err(invalid("buffer capacity, feature width and head count must be positive"));
        }
        if min_fill > capacity {
            return Err(invalid("min_fill cannot exceed the capacity"));
        }
        Ok(Self {
            capacity,
            min_fill,
            obs_dim,
            heads,
            len: 0,
            next: 0,
            obs: Vec::new(),
            next_obs: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            masks: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn ready(&self) -> bool {
        self.len >= self.min_fill.max(1)
    }

    /// Stores a transition, overwriting the oldest once full. `state` is the
    /// environment state behind `obs`, kept for roll-outs started from the buffer.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        obs: &[f64],
        state: State,
        action: usize,
        reward: f64,
        next_obs: &[f64],
        done: bool,
        mask: &[bool],
    ) -> Result<()> {
        if obs.len() != self.obs_dim || next_obs.len() != self.obs_dim || mask.len() != self.heads {
            return Err(MevError::ShapeMismatch("transition does not match the buffer layout".into()));
        }
        let i = self.next;
        if self.len < self.capacity {
            self.obs.extend_from_slice(obs);
            self.next_obs.extend_from_slice(next_obs);
            self.states.push(state);
            self.actions.push(action);
            self.rewards.push(reward);
            self.dones.push(done);
            self.masks.extend_from_slice(mask);
            self.len += 1;
        } else {
            let d = self.obs_dim;
            self.obs[i * d..(i + 1) * d].copy_from_slice(obs);
            self.next_obs[i * d..(i + 1) * d].copy_from_slice(next_obs);
            self.states[i] = state;
            self.actions[i] = action;
            self.rewards[i] = reward;
            self.dones[i] = done;
            self.masks[i * self.heads..(i + 1) * self.heads].copy_from_slice(mask);
        }
        self.next = (i + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> TransitionRef<'_> {
        let d = self.obs_dim;
        TransitionRef {
            obs: &self.obs[i * d..(i + 1) * d],
            state: self.states[i],
            action: self.actions[i],
            reward: self.rewards[i],
            next_obs: &self.next_obs[i * d..(i + 1) * d],
            done: self.dones[i],
            mask: &self.masks[i * self.heads..(i + 1) * self.heads],
        }
    }

    /// Uniform indices with replacement; fails below the minimum fill.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R, out: &mut Vec<usize>) -> Result<()> {
        if !self.ready() {
            return Err(MevError::InsufficientSample { needed: self.min_fill.max(1), got: self.len });
        }
        out.clear();
        out.extend((0..batch).map(|_| rng.random_range(0..self.len)));
        Ok(())
    }

    /// State of a uniformly chosen stored transition.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<State> {
        if self.len == 0 {
            None
        } else {
            Some(self.states[rng.random_range(0..self.len)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 2, 1, 2).unwrap();
        let mut rng = stream_rng(0, &[]);
        let mut idx = Vec::new();
        assert!(b.sample_indices(4, &mut rng, &mut idx).is_err());
        for k in 0..5 {
            b.push(&[k as f64], State(k), 0, k as f64, &[0.0], false, &[true, false]).unwrap();
            assert!(b.len() <= 3);
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
        b.sample_indices(100, &mut rng, &mut idx).unwrap();
        assert!(idx.iter().all(|&i| i < 3));
        assert!(b.push(&[0.0], State(0), 0, 0.0, &[0.0], false, &[true]).is_err());
        assert!(ReplayBuffer::new(2, 3, 1, 1).is_err());
    }
}
