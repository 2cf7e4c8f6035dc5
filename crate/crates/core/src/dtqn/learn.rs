use rand::Rng as _;

use super::buffer::SequenceBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, Tensor, Var};

/// Per-slot regression targets `r + γ·max_a' Q'(next)[slot]`, or `r` on a
/// terminal slot. `q_next` is the target network's `[B·L, |A|]` output on the
/// next-observation windows. Padding slots get 0 and are ignored downstream.
pub fn bellman_targets(batch: &SequenceBatch, q_next: &Tensor, gamma: f64) -> Result<Vec<f64>> {
    let rows = batch.rows();
    if q_next.rank() != 2 || q_next.shape()[0] != rows {
        return Err(Error::dim(format!(
            "next-Q has shape {:?}, batch has {rows} slots",
            q_next.shape()
        )));
    }
    let a = q_next.shape()[1];
    let q = q_next.data();
    Ok((0..rows)
        .map(|i| {
            if !batch.mask[i] {
                return 0.0;
            }
            if batch.dones[i] {
                return batch.rewards[i];
            }
            let best = q[i * a..(i + 1) * a].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            batch.rewards[i] + gamma * best
        })
        .collect())
}

/// Mean squared TD error over real slots.
pub fn td_loss(g: &mut Graph, q: Var, actions: &[usize], targets: &[f64], mask: &[bool]) -> Result<Var> {
    if actions.len() != mask.len() || targets.len() != mask.len() {
        return Err(Error::dim("actions, targets and mask must align"));
    }
    let pairs: Vec<(usize, usize)> = (0..mask.len()).filter(|&i| mask[i]).map(|i| (i, actions[i])).collect();
    if pairs.is_empty() {
        return Err(Error::State("every slot is padding".into()));
    }
    let t: Vec<f64> = pairs.iter().map(|&(i, _)| targets[i]).collect();
    let n = t.len();
    let picked = g.pick(q, &pairs)?;
    g.mse(picked, &Tensor::new(vec![n], t)?)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut Rng) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Linear anneal from `start` to `end` over `steps` decisions, then flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.steps as f64
    }
}

/// Counts gradient steps and fires every `interval`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncCounter {
    pub interval: u64,
    pub since_sync: u64,
}

impl SyncCounter {
    pub fn new(interval: u64) -> Self {
        SyncCounter {
            interval,
            since_sync: 0,
        }
    }

    /// Record one gradient step; true when the target should be synced.
    pub fn tick(&mut self) -> bool {
        self.since_sync += 1;
        if self.since_sync >= self.interval {
            self.since_sync = 0;
            true
        } else {
            false
        }
    }
}
