//! Comparison agents: a recurrent Q-network and a clipped-surrogate PPO.

mod drqn;
mod lstm;
mod ppo;
#[cfg(test)]
mod tests;

pub use drqn::{train_drqn, DrqnConfig, DrqnModel};
pub use lstm::{lstm_cell, LstmParams};
pub use ppo::{
    normalize_advantages, ppo_clip_loss, ppo_gae, train_ppo, ClipCoeffs, PpoConfig, PpoLog, PpoLoss, PpoModel,
    PpoPolicy, PpoUpdate,
};
