use std::rc::Rc;

use rand::Rng as _;

use crate::envs::GameFeatures;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One agent decision. Observations are shared between consecutive
/// transitions, so storing `next_obs` costs a pointer.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Rc<[f32]>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Rc<[f32]>,
    /// True terminal (not a time-limit cut); no bootstrapping past it.
    pub done: bool,
    /// Simulator features at the time `obs` was seen.
    pub features: GameFeatures,
    pub episode: u64,
}

/// Fixed-capacity ring of transitions tagged by episode.
#[derive(Debug)]
pub struct SequenceReplayBuffer {
    capacity: usize,
    obs_len: usize,
    slots: Vec<Transition>,
    /// Total transitions ever pushed; slot of sequence number `s` is `s % capacity`.
    pushed: u64,
}

/// Left-padded windows, flattened row-major as `[B, L, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch_size: usize,
    pub len: usize,
    pub obs_shape: [usize; 3],
    pub observations: Vec<f64>,
    pub next_observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// True for real slots, false for padding.
    pub mask: Vec<bool>,
    pub features: Vec<f64>,
    /// Index of the first real slot in each window.
    pub key_start: Vec<usize>,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.batch_size * self.len
    }

    pub fn real_slots(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

impl SequenceReplayBuffer {
    pub fn new(capacity: usize, obs_shape: [usize; 3]) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(SequenceReplayBuffer {
            capacity,
            obs_len: obs_shape.iter().product(),
            slots: Vec::with_capacity(capacity.min(1 << 16)),
            pushed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.len() != self.obs_len || t.next_obs.len() != self.obs_len {
            return Err(Error::dim(format!(
                "transition observation has {} values, buffer expects {}",
                t.obs.len(),
                self.obs_len
            )));
        }
        let slot = (self.pushed % self.capacity as u64) as usize;
        if slot == self.slots.len() {
            self.slots.push(t);
        } else {
            self.slots[slot] = t;
        }
        self.pushed += 1;
        Ok(())
    }

    fn oldest(&self) -> u64 {
        self.pushed - self.slots.len() as u64
    }

    fn at(&self, seq: u64) -> &Transition {
        &self.slots[(seq % self.capacity as u64) as usize]
    }

    /// Sequence numbers of the window of at most `len` transitions ending at
    /// `end`, all from the same episode and still resident.
    pub fn window(&self, end: u64, len: usize) -> Vec<u64> {
        let episode = self.at(end).episode;
        let mut start = end;
        while end - start + 1 < len as u64 && start > self.oldest() && self.at(start - 1).episode == episode {
            start -= 1;
        }
        (start..=end).collect()
    }

    /// `B` windows with uniformly drawn end points.
    pub fn sample(&self, batch_size: usize, len: usize, obs_shape: [usize; 3], rng: &mut Rng) -> Result<SequenceBatch> {
        if self.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        if len == 0 || batch_size == 0 {
            return Err(Error::Config("batch size and window length must be positive".into()));
        }
        let ends: Vec<u64> = (0..batch_size)
            .map(|_| rng.gen_range(self.oldest()..self.pushed))
            .collect();
        Ok(self.assemble(&ends, len, obs_shape))
    }

    pub fn assemble(&self, ends: &[u64], len: usize, obs_shape: [usize; 3]) -> SequenceBatch {
        let b = ends.len();
        let n = self.obs_len;
        let mut batch = SequenceBatch {
            batch_size: b,
            len,
            obs_shape,
            observations: vec![0.0; b * len * n],
            next_observations: vec![0.0; b * len * n],
            actions: vec![0; b * len],
            rewards: vec![0.0; b * len],
            dones: vec![false; b * len],
            mask: vec![false; b * len],
            features: vec![0.0; b * len * GameFeatures::LEN],
            key_start: Vec::with_capacity(b),
        };
        for (i, &end) in ends.iter().enumerate() {
            let window = self.window(end, len);
            let start = len - window.len();
            batch.key_start.push(start);
            for (j, &seq) in window.iter().enumerate() {
                let t = self.at(seq);
                let row = i * len + start + j;
                for (dst, src) in batch.observations[row * n..(row + 1) * n].iter_mut().zip(t.obs.iter()) {
                    *dst = *src as f64;
                }
                for (dst, src) in batch.next_observations[row * n..(row + 1) * n]
                    .iter_mut()
                    .zip(t.next_obs.iter())
                {
                    *dst = *src as f64;
                }
                batch.actions[row] = t.action;
                batch.rewards[row] = t.reward;
                batch.dones[row] = t.done;
                batch.mask[row] = true;
                batch.features[row * 3..row * 3 + 3].copy_from_slice(&t.features.to_array());
            }
        }
        batch
    }

    /// Episode id of a resident transition.
    pub fn episode_of(&self, seq: u64) -> u64 {
        self.at(seq).episode
    }

    pub fn seq_range(&self) -> std::ops::Range<u64> {
        self.oldest()..self.pushed
    }
}
