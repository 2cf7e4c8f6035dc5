use rand::Rng as _;

use super::{check_step, EnvKind, Environment, GameFeatures, Observation, StepResult};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const SHOOT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GridBasicConfig {
    pub width: usize,
    /// Sub-cell steps per cell; one tic of movement covers one step.
    pub cell_units: usize,
    pub living_reward: f64,
    pub miss_penalty: f64,
    pub kill_reward: f64,
    pub max_tics: u32,
    /// Hits needed to kill the monster.
    pub monster_health: u32,
}

impl Default for GridBasicConfig {
    fn default() -> Self {
        GridBasicConfig {
            width: 11,
            cell_units: 5,
            living_reward: -1.0,
            miss_penalty: -5.0,
            kill_reward: 101.0,
            max_tics: 300,
            monster_health: 1,
        }
    }
}

impl GridBasicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.cell_units < 1 || self.max_tics < 1 || self.monster_health < 1 {
            return Err(Error::Config(
                "gridbasic width, cell_units, max_tics and monster_health must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One-row firing range. The monster stands still on the far wall; the agent
/// strafes along the near wall and shoots straight ahead.
#[derive(Clone, Debug, PartialEq)]
pub struct GridBasic {
    cfg: GridBasicConfig,
    agent: usize,
    monster_col: usize,
    monster_health: u32,
    tic: u32,
    done: bool,
    rng: Rng,
}

impl GridBasic {
    pub fn new(cfg: GridBasicConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = GridBasic {
            agent: 0,
            monster_col: 0,
            monster_health: cfg.monster_health,
            tic: 0,
            done: false,
            rng: rng_from_seed(0),
            cfg,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &GridBasicConfig {
        &self.cfg
    }

    /// Cell the agent occupies (nearest cell centre).
    pub fn agent_col(&self) -> usize {
        (self.agent + self.cfg.cell_units / 2) / self.cfg.cell_units
    }

    pub fn monster_col(&self) -> usize {
        self.monster_col
    }

    /// Place the monster directly; used to set up scripted situations.
    pub fn set_monster_col(&mut self, col: usize) -> Result<()> {
        if col >= self.cfg.width {
            return Err(Error::Index(format!("column {col} outside 0..{}", self.cfg.width)));
        }
        self.monster_col = col;
        Ok(())
    }

    fn max_pos(&self) -> usize {
        (self.cfg.width - 1) * self.cfg.cell_units
    }
}

impl Environment for GridBasic {
    fn kind(&self) -> EnvKind {
        EnvKind::GridBasic
    }

    fn obs_shape(&self) -> [usize; 3] {
        [3, 3, self.cfg.width]
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = rng_from_seed(seed);
        self.agent = (self.cfg.width / 2) * self.cfg.cell_units;
        self.monster_col = self.rng.gen_range(0..self.cfg.width);
        self.monster_health = self.cfg.monster_health;
        self.tic = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_step(self.done, action, 3)?;
        let mut reward = self.cfg.living_reward;
        let mut kills = 0;
        match action {
            LEFT => self.agent = self.agent.saturating_sub(1),
            RIGHT => self.agent = (self.agent + 1).min(self.max_pos()),
            _ => {
                if self.agent_col() == self.monster_col {
                    self.monster_health -= 1;
                    if self.monster_health == 0 {
                        reward += self.cfg.kill_reward;
                        kills = 1;
                        self.done = true;
                    }
                } else {
                    reward += self.cfg.miss_penalty;
                }
            }
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
            kills,
            deaths: 0,
        })
    }

    fn features(&self) -> GameFeatures {
        GameFeatures {
            health: 1.0,
            ammo: 1.0,
            enemies: if self.monster_health > 0 { 1.0 } else { 0.0 },
        }
    }

    // planes: far wall, monster, agent
    fn observe(&self) -> Observation {
        let mut obs = Observation::zeros(self.obs_shape());
        for c in 0..self.cfg.width {
            obs.set(0, 0, c);
        }
        if self.monster_health > 0 {
            obs.set(1, 0, self.monster_col);
        }
        obs.set(2, 2, self.agent_col());
        obs
    }

    fn render_ascii(&self) -> String {
        let w = self.cfg.width;
        let mut rows = vec![vec!['#'; w], vec!['.'; w], vec!['.'; w]];
        if self.monster_health > 0 {
            rows[0][self.monster_col] = 'M';
        }
        rows[2][self.agent_col()] = '@';
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
