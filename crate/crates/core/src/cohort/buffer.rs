//! Offline replay buffer: one transition per consecutive bin pair of every
//! train-split trajectory. The buffer never grows after construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Cohort, Split, Trajectory};
use crate::encoders::StateEncoder;
use crate::error::{Error, Result};
use crate::rewards::RewardConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: u8,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Index of the source trajectory within the cohort.
    pub patient: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
    state_dim: usize,
}

impl ReplayBuffer {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        let state_dim = transitions.first().map_or(0, |t| t.state.len());
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != state_dim || t.next_state.len() != state_dim {
                return Err(Error::input(format!("transition {i} has inconsistent state width")));
            }
            if t.action > 1 {
                return Err(Error::input(format!("transition {i} has non-binary action {}", t.action)));
            }
            if !t.reward.is_finite() || t.state.iter().chain(&t.next_state).any(|v| !v.is_finite()) {
                return Err(Error::input(format!("transition {i} has non-finite values")));
            }
        }
        Ok(Self { transitions, state_dim })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    /// `batch` indices drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        (0..batch).map(|_| rng.random_range(0..self.len())).collect()
    }
}

/// Transitions for one trajectory given its encoded states and rewards.
pub fn trajectory_transitions(
    traj: &Trajectory,
    states: &[Vec<f64>],
    rewards: &[f64],
    patient: usize,
) -> Result<Vec<Transition>> {
    let n = traj.transitions();
    if states.len() != traj.len() || rewards.len() != n {
        return Err(Error::input(format!("patient {}: state/reward counts do not match its bins", traj.patient_id)));
    }
    Ok((0..n)
        .map(|t| Transition {
            state: states[t].clone(),
            action: traj.actions[t],
            reward: rewards[t],
            next_state: states[t + 1].clone(),
            done: t + 1 == n,
            patient,
        })
        .collect())
}

/// Buffer over the train split, with states from `encoder` and rewards from
/// `rewards`.
pub fn build_buffer(cohort: &Cohort, encoder: &dyn StateEncoder, rewards: &RewardConfig) -> Result<ReplayBuffer> {
    build_buffer_for(cohort, &cohort.indices(Split::Train), encoder, rewards)
}

/// Buffer over an explicit set of trajectory indices.
pub fn build_buffer_for(
    cohort: &Cohort,
    indices: &[usize],
    encoder: &dyn StateEncoder,
    rewards: &RewardConfig,
) -> Result<ReplayBuffer> {
    rewards.validate()?;
    let mut out = Vec::new();
    for &i in indices {
        let traj = &cohort.trajectories[i];
        if traj.len() < 2 {
            log::warn!("skipping patient {} with {} bin(s)", traj.patient_id, traj.len());
            continue;
        }
        let states = encoder.encode_trajectory(traj)?;
        let r = rewards.assign(traj)?;
        out.extend(trajectory_transitions(traj, &states, &r, i)?);
    }
    if out.is_empty() {
        return Err(Error::input("no transitions: the selected trajectories are all shorter than two bins"));
    }
    ReplayBuffer::new(out)
}
