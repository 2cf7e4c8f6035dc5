//! Online transformer Q-learning over observation histories.
//!
//! The agent keeps the last `context_len` frames of the current episode,
//! encodes each frame, runs a causal transformer over the sequence and reads
//! Q-values at every position. Training samples left-padded windows from a
//! replay buffer and regresses every real position onto its own Bellman
//! target, computed by a target copy of the network over the next-observation
//! window.

mod buffer;
mod learn;
mod model;
mod train;

pub use buffer::{SequenceBatch, SequenceReplayBuffer, Transition};
pub use learn::{argmax, bellman_targets, epsilon_greedy, td_loss, EpsilonSchedule, SyncCounter};
pub use model::{aux_features_loss, q_window, DtqnConfig, DtqnModel, QOutput, SequenceQNet};
pub use train::{
    evaluate_q_agent, q_learning_step, train_dtqn, train_q_agent, LossRecord, QActor, QLearnConfig, TrainLog,
};
