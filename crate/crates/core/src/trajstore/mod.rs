//! Offline datasets: collection, the DRLT binary format, and summary stats.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DRLT" | version u32 | C u32 | H u32 | W u32 | actions u32 | count u64
//!        | tag_len u32 | tag bytes | frame_skip u32
//! per trajectory: T u32 | T·C·H·W f32 observations | T u32 actions | T f32 rewards
//! ```
//!
//! Returns-to-go are not stored; they are recomputed from rewards on load.

mod format;

use std::path::Path;

use crate::dt::Trajectory;
use crate::envs::{frame_skip_step, EnvConfig, Policy};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, MAGIC, VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub obs_shape: [usize; 3],
    pub n_actions: usize,
    pub env_tag: String,
    pub frame_skip: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    pub mean_return: f64,
    pub min_return: f64,
    pub max_return: f64,
    pub mean_length: f64,
}

/// Single pass over the episode returns and lengths.
pub fn dataset_stats(trajectories: &[Trajectory]) -> Result<DatasetStats> {
    if trajectories.is_empty() {
        return Err(Error::State("dataset is empty".into()));
    }
    let (mut sum, mut min, mut max, mut len) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for t in trajectories {
        let r = t.episode_return();
        sum += r;
        min = min.min(r);
        max = max.max(r);
        len += t.len();
    }
    let n = trajectories.len() as f64;
    Ok(DatasetStats {
        count: trajectories.len(),
        mean_return: sum / n,
        min_return: min,
        max_return: max,
        mean_length: len as f64 / n,
    })
}

pub fn stats_file(path: &Path) -> Result<DatasetStats> {
    dataset_stats(&read_dataset(path)?.trajectories)
}

/// Seed of collection episode `i`.
pub fn collect_episode_seed(seed: u64, i: u64) -> u64 {
    derive_seed(derive_seed(seed, 0xC011), i)
}

/// Run `n` episodes of `policy` with frame skipping and record them. Rewards
/// are rounded to f32 as they are recorded so the file holds them exactly.
pub fn collect(policy: &mut dyn Policy, env_cfg: &EnvConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("collect needs at least one trajectory".into()));
    }
    env_cfg.validate()?;
    let mut env = env_cfg.build()?;
    let n_actions = env.num_actions();
    if let Some(p) = policy.num_actions() {
        if p != n_actions {
            return Err(Error::Config(format!(
                "policy acts over {p} actions; {} has {n_actions}",
                env_cfg.kind
            )));
        }
    }
    let obs_shape = env.obs_shape();
    let mut rng = rng_from_seed(derive_seed(seed, 0xC012));
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mut obs = env.reset(collect_episode_seed(seed, i as u64));
        policy.reset();
        let mut traj = Trajectory::new(obs_shape, Vec::new(), Vec::new(), Vec::new())?;
        while !env.is_done() {
            let a = policy.act(&obs, &mut rng)?;
            if a >= n_actions {
                return Err(Error::Index(format!("policy chose action {a} outside 0..{n_actions}")));
            }
            let r = frame_skip_step(env.as_mut(), a, env_cfg.frame_skip)?;
            traj.observations.extend_from_slice(obs.data());
            traj.actions.push(a);
            traj.rewards.push(r.reward as f32 as f64);
            obs = r.observation;
        }
        trajectories.push(traj);
    }
    Ok(Dataset {
        header: DatasetHeader {
            obs_shape,
            n_actions,
            env_tag: env_cfg.kind.tag().to_string(),
            frame_skip: env_cfg.frame_skip,
        },
        trajectories,
    })
}
