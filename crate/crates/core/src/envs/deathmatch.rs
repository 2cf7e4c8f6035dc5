use rand::Rng as _;

use super::{check_step, EnvKind, Environment, GameFeatures, Observation, StepResult};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const TURN_LEFT: usize = 0;
pub const TURN_RIGHT: usize = 1;
pub const FORWARD: usize = 2;
pub const SHOOT: usize = 3;
pub const NOOP: usize = 4;

const DIRS: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

#[derive(Clone, Debug, PartialEq)]
pub struct DeathmatchConfig {
    pub size: usize,
    pub enemies: usize,
    pub enemy_health: u32,
    pub enemy_damage: u32,
    pub enemy_move_prob: f64,
    pub enemy_shoot_prob: f64,
    pub enemy_range: usize,
    pub enemy_respawn_tics: u32,
    pub start_health: u32,
    pub start_ammo: u32,
    pub max_ammo: u32,
    pub health_packs: usize,
    pub ammo_packs: usize,
    pub health_pack_amount: u32,
    pub ammo_pack_amount: u32,
    pub pickup_respawn_tics: u32,
    pub view_depth: usize,
    pub max_tics: u32,
    pub kill_reward: f64,
    pub death_reward: f64,
    pub pickup_reward: f64,
    pub health_loss_reward: f64,
    pub wasted_shot_reward: f64,
    pub living_reward: f64,
}

impl Default for DeathmatchConfig {
    fn default() -> Self {
        DeathmatchConfig {
            size: 9,
            enemies: 3,
            enemy_health: 1,
            enemy_damage: 10,
            enemy_move_prob: 0.5,
            enemy_shoot_prob: 0.1,
            enemy_range: 4,
            enemy_respawn_tics: 30,
            start_health: 100,
            start_ammo: 20,
            max_ammo: 50,
            health_packs: 2,
            ammo_packs: 2,
            health_pack_amount: 25,
            ammo_pack_amount: 10,
            pickup_respawn_tics: 60,
            view_depth: 4,
            max_tics: 1000,
            kill_reward: 1.0,
            death_reward: -1.0,
            pickup_reward: 0.1,
            health_loss_reward: -0.05,
            wasted_shot_reward: -0.02,
            living_reward: 0.0,
        }
    }
}

impl DeathmatchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("minideathmatch: {m}")));
        if self.size < 5 {
            return bad("size must be >= 5");
        }
        if self.enemy_health == 0 || self.start_health == 0 || self.max_ammo == 0 {
            return bad("enemy_health, start_health and max_ammo must be positive");
        }
        if self.start_ammo > self.max_ammo {
            return bad("start_ammo exceeds max_ammo");
        }
        for p in [self.enemy_move_prob, self.enemy_shoot_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.view_depth == 0 || self.max_tics == 0 {
            return bad("view_depth and max_tics must be positive");
        }
        let free = (self.size - 2) * (self.size - 2) - 4;
        if self.enemies + self.health_packs + self.ammo_packs + 1 > free {
            return bad("arena too small for the requested entities");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Enemy {
    pos: (i64, i64),
    health: u32,
    respawn_in: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PickupKind {
    Health,
    Ammo,
}

#[derive(Clone, Debug, PartialEq)]
struct Pickup {
    kind: PickupKind,
    pos: (i64, i64),
    respawn_in: u32,
}

/// Walled square arena with pillars, scripted enemies that wander and shoot
/// along open rows and columns, and health/ammo pickups. The agent sees an
/// egocentric cone `view_depth` cells deep (no occlusion). Death respawns the
/// agent; the episode only ends at the tic cap.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniDeathmatch {
    cfg: DeathmatchConfig,
    agent: (i64, i64),
    facing: usize,
    health: u32,
    ammo: u32,
    enemies: Vec<Enemy>,
    pickups: Vec<Pickup>,
    kills: u32,
    deaths: u32,
    tic: u32,
    done: bool,
    rng: Rng,
}

impl MiniDeathmatch {
    pub fn new(cfg: DeathmatchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = MiniDeathmatch {
            agent: (1, 1),
            facing: 0,
            health: cfg.start_health,
            ammo: cfg.start_ammo,
            enemies: Vec::new(),
            pickups: Vec::new(),
            kills: 0,
            deaths: 0,
            tic: 0,
            done: false,
            rng: rng_from_seed(0),
            cfg,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &DeathmatchConfig {
        &self.cfg
    }

    pub fn health(&self) -> u32 {
        self.health
    }

    pub fn ammo(&self) -> u32 {
        self.ammo
    }

    pub fn agent(&self) -> ((i64, i64), usize) {
        (self.agent, self.facing)
    }

    /// Episode totals so far.
    pub fn kills_deaths(&self) -> (u32, u32) {
        (self.kills, self.deaths)
    }

    pub fn enemy_positions(&self) -> Vec<(i64, i64)> {
        self.enemies
            .iter()
            .filter(|e| e.health > 0)
            .map(|e| e.pos)
            .collect()
    }

    /// Move an enemy; used to stage scenarios in tests and tools.
    pub fn place_enemy(&mut self, index: usize, pos: (i64, i64)) -> Result<()> {
        if index >= self.enemies.len() || self.is_wall(pos) {
            return Err(Error::Index(format!("cannot place enemy {index} at {pos:?}")));
        }
        let e = &mut self.enemies[index];
        e.pos = pos;
        e.health = self.cfg.enemy_health;
        e.respawn_in = 0;
        Ok(())
    }

    pub fn place_agent(&mut self, pos: (i64, i64), facing: usize) -> Result<()> {
        if self.is_wall(pos) || facing >= 4 {
            return Err(Error::Index(format!("cannot place agent at {pos:?}")));
        }
        self.agent = pos;
        self.facing = facing;
        Ok(())
    }

    pub fn is_wall(&self, (r, c): (i64, i64)) -> bool {
        let n = self.cfg.size as i64;
        if r <= 0 || c <= 0 || r >= n - 1 || c >= n - 1 {
            return true;
        }
        let (a, b) = (2, n - 3);
        (r == a || r == b) && (c == a || c == b)
    }

    fn enemy_at(&self, pos: (i64, i64)) -> Option<usize> {
        self.enemies.iter().position(|e| e.health > 0 && e.pos == pos)
    }

    fn random_free_cell(&mut self, min_dist_from_agent: i64) -> (i64, i64) {
        let n = self.cfg.size as i64;
        loop {
            let pos = (self.rng.gen_range(1..n - 1), self.rng.gen_range(1..n - 1));
            let dist = (pos.0 - self.agent.0).abs() + (pos.1 - self.agent.1).abs();
            if !self.is_wall(pos) && dist >= min_dist_from_agent && self.enemy_at(pos).is_none() {
                return pos;
            }
        }
    }

    /// Clear straight line between agent and `pos` within enemy range.
    fn line_of_fire(&self, pos: (i64, i64)) -> bool {
        let (dr, dc) = (pos.0 - self.agent.0, pos.1 - self.agent.1);
        if (dr != 0 && dc != 0) || (dr == 0 && dc == 0) {
            return false;
        }
        let dist = dr.abs().max(dc.abs());
        if dist as usize > self.cfg.enemy_range {
            return false;
        }
        let step = (dr.signum(), dc.signum());
        (1..dist).all(|i| !self.is_wall((self.agent.0 + i * step.0, self.agent.1 + i * step.1)))
    }

    /// Cell at `depth` ahead and `lateral` to the right of the agent.
    fn cone_cell(&self, depth: usize, lateral: i64) -> (i64, i64) {
        let f = DIRS[self.facing];
        let r = DIRS[(self.facing + 1) % 4];
        let d = depth as i64;
        (
            self.agent.0 + d * f.0 + lateral * r.0,
            self.agent.1 + d * f.1 + lateral * r.1,
        )
    }

    fn cone(&self) -> impl Iterator<Item = (usize, i64)> + '_ {
        let depth = self.cfg.view_depth;
        (0..=depth).flat_map(|d| (-(d as i64)..=d as i64).map(move |l| (d, l)))
    }

    fn visible_enemies(&self) -> usize {
        self.cone()
            .filter(|&(d, l)| self.enemy_at(self.cone_cell(d, l)).is_some())
            .count()
    }

    fn shoot(&mut self) -> (f64, u32) {
        if self.ammo == 0 {
            return (self.cfg.wasted_shot_reward, 0);
        }
        self.ammo -= 1;
        let f = DIRS[self.facing];
        let mut pos = self.agent;
        loop {
            pos = (pos.0 + f.0, pos.1 + f.1);
            if self.is_wall(pos) {
                return (self.cfg.wasted_shot_reward, 0);
            }
            if let Some(i) = self.enemy_at(pos) {
                let e = &mut self.enemies[i];
                e.health -= 1;
                if e.health == 0 {
                    e.respawn_in = self.cfg.enemy_respawn_tics.max(1);
                    return (self.cfg.kill_reward, 1);
                }
                return (0.0, 0);
            }
        }
    }

    fn respawn_agent(&mut self) {
        self.agent = self.random_free_cell(0);
        self.facing = self.rng.gen_range(0..4);
        self.health = self.cfg.start_health;
        self.ammo = self.cfg.start_ammo;
    }
}

impl Environment for MiniDeathmatch {
    fn kind(&self) -> EnvKind {
        EnvKind::MiniDeathmatch
    }

    fn obs_shape(&self) -> [usize; 3] {
        let d = self.cfg.view_depth;
        [4, d + 1, 2 * d + 1]
    }

    fn num_actions(&self) -> usize {
        5
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = rng_from_seed(seed);
        self.enemies.clear();
        self.pickups.clear();
        self.agent = (0, 0);
        self.respawn_agent();
        for _ in 0..self.cfg.enemies {
            let pos = self.random_free_cell(3);
            self.enemies.push(Enemy {
                pos,
                health: self.cfg.enemy_health,
                respawn_in: 0,
            });
        }
        let kinds = std::iter::repeat(PickupKind::Health)
            .take(self.cfg.health_packs)
            .chain(std::iter::repeat(PickupKind::Ammo).take(self.cfg.ammo_packs));
        for kind in kinds.collect::<Vec<_>>() {
            let pos = self.random_free_cell(1);
            self.pickups.push(Pickup {
                kind,
                pos,
                respawn_in: 0,
            });
        }
        self.kills = 0;
        self.deaths = 0;
        self.tic = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_step(self.done, action, 5)?;
        let cfg = self.cfg.clone();
        let mut reward = cfg.living_reward;
        let (mut kills, mut deaths) = (0, 0);

        match action {
            TURN_LEFT => self.facing = (self.facing + 3) % 4,
            TURN_RIGHT => self.facing = (self.facing + 1) % 4,
            FORWARD => {
                let f = DIRS[self.facing];
                let next = (self.agent.0 + f.0, self.agent.1 + f.1);
                if !self.is_wall(next) && self.enemy_at(next).is_none() {
                    self.agent = next;
                }
            }
            SHOOT => {
                let (r, k) = self.shoot();
                reward += r;
                kills += k;
            }
            _ => {}
        }

        for i in 0..self.pickups.len() {
            let p = &self.pickups[i];
            if p.respawn_in == 0 && p.pos == self.agent {
                match p.kind {
                    PickupKind::Health => {
                        self.health = (self.health + cfg.health_pack_amount).min(cfg.start_health)
                    }
                    PickupKind::Ammo => {
                        self.ammo = (self.ammo + cfg.ammo_pack_amount).min(cfg.max_ammo)
                    }
                }
                self.pickups[i].respawn_in = cfg.pickup_respawn_tics.max(1);
                reward += cfg.pickup_reward;
            }
        }

        for i in 0..self.enemies.len() {
            if self.enemies[i].health == 0 {
                continue;
            }
            let pos = self.enemies[i].pos;
            if self.line_of_fire(pos) && self.rng.gen_bool(cfg.enemy_shoot_prob) {
                let lost = cfg.enemy_damage.min(self.health);
                self.health -= lost;
                reward += cfg.health_loss_reward * lost as f64;
                if self.health == 0 {
                    reward += cfg.death_reward;
                    deaths += 1;
                    self.respawn_agent();
                }
            } else if self.rng.gen_bool(cfg.enemy_move_prob) {
                let d = DIRS[self.rng.gen_range(0..4)];
                let next = (pos.0 + d.0, pos.1 + d.1);
                if !self.is_wall(next) && next != self.agent && self.enemy_at(next).is_none() {
                    self.enemies[i].pos = next;
                }
            }
        }

        for i in 0..self.enemies.len() {
            let e = &mut self.enemies[i];
            if e.health == 0 {
                e.respawn_in -= 1;
                if e.respawn_in == 0 {
                    let pos = self.random_free_cell(3);
                    let e = &mut self.enemies[i];
                    e.pos = pos;
                    e.health = cfg.enemy_health;
                }
            }
        }
        for p in &mut self.pickups {
            p.respawn_in = p.respawn_in.saturating_sub(1);
        }

        self.kills += kills;
        self.deaths += deaths;
        self.tic += 1;
        let timed_out = self.tic >= cfg.max_tics;
        self.done = timed_out;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            timed_out,
            features: self.features(),
            kills,
            deaths,
        })
    }

    fn features(&self) -> GameFeatures {
        GameFeatures {
            health: self.health as f64 / self.cfg.start_health as f64,
            ammo: self.ammo as f64 / self.cfg.max_ammo as f64,
            enemies: self.visible_enemies() as f64 / self.cfg.enemies.max(1) as f64,
        }
    }

    // planes: walls, enemies, self, pickups; row 0 is the far edge of the cone
    fn observe(&self) -> Observation {
        let depth = self.cfg.view_depth;
        let mut obs = Observation::zeros(self.obs_shape());
        for (d, l) in self.cone() {
            let pos = self.cone_cell(d, l);
            let (row, col) = (depth - d, (l + depth as i64) as usize);
            if self.is_wall(pos) {
                obs.set(0, row, col);
            }
            if self.enemy_at(pos).is_some() {
                obs.set(1, row, col);
            }
            if self
                .pickups
                .iter()
                .any(|p| p.respawn_in == 0 && p.pos == pos)
            {
                obs.set(3, row, col);
            }
        }
        obs.set(2, depth, depth);
        obs
    }

    fn render_ascii(&self) -> String {
        let n = self.cfg.size as i64;
        let mut out = String::with_capacity((n * (n + 1)) as usize);
        for r in 0..n {
            for c in 0..n {
                let pos = (r, c);
                let ch = if self.is_wall(pos) {
                    '#'
                } else if pos == self.agent {
                    '@'
                } else if self.enemy_at(pos).is_some() {
                    'M'
                } else if let Some(p) = self.pickups.iter().find(|p| p.respawn_in == 0 && p.pos == pos) {
                    match p.kind {
                        PickupKind::Health => '+',
                        PickupKind::Ammo => 'a',
                    }
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn tic(&self) -> u32 {
        self.tic
    }
}
