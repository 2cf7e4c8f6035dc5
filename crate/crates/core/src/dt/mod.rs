//! Offline return-conditioned sequence modelling.
//!
//! Each timestep contributes three tokens (return-to-go, state, action). A
//! causal transformer reads them in that order and the action for step `t` is
//! predicted from the output at the state token of `t`, so it sees the
//! desired return and everything before it but never the action itself.

mod model;
mod rollout;
mod train;

use crate::error::{Error, Result};

pub use model::{dt_forward, dt_loss, DtBatch, DtConfig, DtModel};
pub use rollout::{dt_rollout, evaluate_dt, RolloutConfig, RolloutResult};
pub use train::{sample_windows, train_dt, train_dt_model, DtTrainConfig, DtTrainLog};

/// `rtg[t] = r[t] + γ·rtg[t+1]`.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One recorded episode. Observations are stored flat, `T × C·H·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub obs_shape: [usize; 3],
    pub observations: Vec<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(obs_shape: [usize; 3], observations: Vec<f32>, actions: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        let frame: usize = obs_shape.iter().product();
        if actions.len() != rewards.len() || observations.len() != actions.len() * frame {
            return Err(Error::dim(format!(
                "trajectory lengths disagree: {} actions, {} rewards, {} observation values for frame size {frame}",
                actions.len(),
                rewards.len(),
                observations.len()
            )));
        }
        Ok(Trajectory {
            obs_shape,
            observations,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.observations[t * n..(t + 1) * n]
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn rtg(&self, gamma: f64) -> Vec<f64> {
        compute_rtg(&self.rewards, gamma)
    }
}
