use rand::Rng as _;

use super::{check_step, EnvKind, Environment, GameFeatures, Observation, StepResult};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const FORWARD: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct HallwayConfig {
    pub length: usize,
    pub max_tics: u32,
    pub success_reward: f64,
}

impl Default for HallwayConfig {
    fn default() -> Self {
        HallwayConfig {
            length: 6,
            max_tics: 60,
            success_reward: 1.0,
        }
    }
}

impl HallwayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.max_tics < 1 {
            return Err(Error::Config("hallway length must be >= 2 and max_tics >= 1".into()));
        }
        Ok(())
    }
}

/// T-maze. The corridor is the middle row; at its far end the agent turns up
/// or down into one of two goal cells. A cue next to the start, visible only
/// on the first observation, says which goal pays.
#[derive(Clone, Debug, PartialEq)]
pub struct Hallway {
    cfg: HallwayConfig,
    row: usize,
    col: usize,
    goal_up: bool,
    tic: u32,
    done: bool,
    rng: Rng,
}

impl Hallway {
    pub fn new(cfg: HallwayConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = Hallway {
            cfg,
            row: 1,
            col: 0,
            goal_up: true,
            tic: 0,
            done: false,
            rng: rng_from_seed(0),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn goal_up(&self) -> bool {
        self.goal_up
    }

    pub fn position(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

impl Environment for Hallway {
    fn kind(&self) -> EnvKind {
        EnvKind::Hallway
    }

    fn obs_shape(&self) -> [usize; 3] {
        [3, 3, self.cfg.length]
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = rng_from_seed(seed);
        self.goal_up = self.rng.gen_bool(0.5);
        self.row = 1;
        self.col = 0;
        self.tic = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_step(self.done, action, 3)?;
        let end = self.cfg.length - 1;
        let mut reward = 0.0;
        match action {
            FORWARD if self.row == 1 && self.col < end => self.col += 1,
            UP | DOWN if self.row == 1 && self.col == end => {
                self.row = if action == UP { 0 } else { 2 };
                self.done = true;
                if (action == UP) == self.goal_up {
                    reward = self.cfg.success_reward;
                }
            }
            _ => {}
        }
        self.tic += 1;
        let timed_out = !self.done && self.tic >= self.cfg.max_tics;
        self.done |= timed_out;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            timed_out,
            features: self.features(),
            kills: 0,
            deaths: 0,
        })
    }

    fn features(&self) -> GameFeatures {
        GameFeatures {
            health: 1.0,
            ammo: 1.0,
            enemies: 0.0,
        }
    }

    // planes: walls, cue, agent
    fn observe(&self) -> Observation {
        let mut obs = Observation::zeros(self.obs_shape());
        let end = self.cfg.length - 1;
        for c in 0..end {
            obs.set(0, 0, c);
            obs.set(0, 2, c);
        }
        if self.tic == 0 {
            obs.set(1, if self.goal_up { 0 } else { 2 }, 0);
        }
        obs.set(2, self.row, self.col);
        obs
    }

    fn render_ascii(&self) -> String {
        let n = self.cfg.length;
        let mut rows = vec![vec!['#'; n], vec!['.'; n], vec!['#'; n]];
        rows[0][n - 1] = 'G';
        rows[2][n - 1] = 'G';
        if self.tic == 0 {
            rows[if self.goal_up { 0 } else { 2 }][0] = 'C';
        }
        rows[self.row][self.col] = '@';
        rows.into_iter()
            .map(|r| r.into_iter().collect::<String>() + "\n")
            .collect()
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn tic(&self) -> u32 {
        self.tic
    }
}
