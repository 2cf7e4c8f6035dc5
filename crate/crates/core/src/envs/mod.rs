//! Small deterministic grid environments with one-hot plane observations.
//!
//! Every environment is driven tic by tic through [`Environment::step`];
//! agents normally act through [`frame_skip_step`], which repeats one action
//! for `k + 1` tics.

pub mod deathmatch;
pub mod gridbasic;
pub mod hallway;
mod policy;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use deathmatch::{DeathmatchConfig, MiniDeathmatch};
pub use gridbasic::{GridBasic, GridBasicConfig};
pub use hallway::{Hallway, HallwayConfig};
pub use policy::{eval_episode_seed, evaluate_policy, GridBasicExpert, HallwayOracle, Policy, RandomPolicy};

/// Channel-major `C x H x W` grid of 0/1 planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Observation {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Observation {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape[0] * shape[1] * shape[2] {
            return Err(Error::dim(format!(
                "observation {:?} needs {} values, got {}",
                shape,
                shape[0] * shape[1] * shape[2],
                data.len()
            )));
        }
        Ok(Observation { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    pub(crate) fn set(&mut self, c: usize, h: usize, w: usize) {
        let i = (c * self.shape[1] + h) * self.shape[2] + w;
        self.data[i] = 1.0;
    }

    /// Cells set in channel `c`, as (row, col).
    pub fn cells(&self, c: usize) -> Vec<(usize, usize)> {
        let [_, h, w] = self.shape;
        let plane = &self.data[c * h * w..(c + 1) * h * w];
        plane
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }
}

/// Simulator-side quantities normalized to [0, 1]. Never derivable from the
/// observation alone.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GameFeatures {
    pub health: f64,
    pub ammo: f64,
    pub enemies: f64,
}

impl GameFeatures {
    pub const LEN: usize = 3;

    pub fn to_array(self) -> [f64; 3] {
        [self.health, self.ammo, self.enemies]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Episode ended because the tic cap was hit.
    pub timed_out: bool,
    pub features: GameFeatures,
    pub kills: u32,
    pub deaths: u32,
}

pub trait Environment {
    fn kind(&self) -> EnvKind;
    fn obs_shape(&self) -> [usize; 3];
    fn num_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Observation;
    /// Advance one tic.
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn features(&self) -> GameFeatures;
    fn observe(&self) -> Observation;
    fn render_ascii(&self) -> String;
    fn is_done(&self) -> bool;
    fn tic(&self) -> u32;
}

pub(crate) fn check_step(done: bool, action: usize, n_actions: usize) -> Result<()> {
    if done {
        return Err(Error::State("episode is over; call reset".into()));
    }
    if action >= n_actions {
        return Err(Error::Index(format!(
            "action {action} outside 0..{n_actions}"
        )));
    }
    Ok(())
}

/// Repeat `action` for `k + 1` tics, stopping early when the episode ends.
pub fn frame_skip_step(env: &mut dyn Environment, action: usize, k: u32) -> Result<StepResult> {
    let mut last = env.step(action)?;
    let (mut reward, mut kills, mut deaths) = (last.reward, last.kills, last.deaths);
    for _ in 0..k {
        if last.done {
            break;
        }
        last = env.step(action)?;
        reward += last.reward;
        kills += last.kills;
        deaths += last.deaths;
    }
    last.reward = reward;
    last.kills = kills;
    last.deaths = deaths;
    Ok(last)
}

pub fn game_features(env: &dyn Environment) -> GameFeatures {
    env.features()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    GridBasic,
    MiniDeathmatch,
    Hallway,
}

impl EnvKind {
    pub fn tag(self) -> &'static str {
        match self {
            EnvKind::GridBasic => "gridbasic",
            EnvKind::MiniDeathmatch => "minideathmatch",
            EnvKind::Hallway => "hallway",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gridbasic" => Ok(EnvKind::GridBasic),
            "minideathmatch" => Ok(EnvKind::MiniDeathmatch),
            "hallway" => Ok(EnvKind::Hallway),
            _ => Err(Error::Config(format!("unknown environment '{s}'"))),
        }
    }
}

/// Which environment to build plus the settings for every kind.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub frame_skip: u32,
    pub gridbasic: GridBasicConfig,
    pub deathmatch: DeathmatchConfig,
    pub hallway: HallwayConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            kind: EnvKind::GridBasic,
            frame_skip: 4,
            gridbasic: GridBasicConfig::default(),
            deathmatch: DeathmatchConfig::default(),
            hallway: HallwayConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EnvKind::GridBasic => self.gridbasic.validate(),
            EnvKind::MiniDeathmatch => self.deathmatch.validate(),
            EnvKind::Hallway => self.hallway.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self.kind {
            EnvKind::GridBasic => Box::new(GridBasic::new(self.gridbasic.clone())?),
            EnvKind::MiniDeathmatch => Box::new(MiniDeathmatch::new(self.deathmatch.clone())?),
            EnvKind::Hallway => Box::new(Hallway::new(self.hallway.clone())?),
        })
    }
}
