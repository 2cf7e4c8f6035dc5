//! Flat `key = value` configuration: defaults, then a file, then `--set` flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use seqrl::baselines::{DrqnConfig, PpoConfig};
use seqrl::dt::{DtConfig, DtTrainConfig, RolloutConfig};
use seqrl::dtqn::{DtqnConfig, QLearnConfig};
use seqrl::envs::{DeathmatchConfig, EnvConfig, EnvKind, GridBasicConfig, HallwayConfig};
use seqrl::transformer::{Gating, TransformerConfig};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Int => "integer",
            Kind::Float => "float",
            Kind::Bool => "bool",
            Kind::Str => "string",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            // `{:?}` keeps a decimal point so the value re-parses as a float
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => f.write_str(v),
        }
    }
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Default,
    File { path: String, line: usize },
    Flag { index: usize },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => f.write_str("built-in default"),
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Flag { index } => write!(f, "--set #{index}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Origin },
    #[error("{origin}: `{key}` expects a {expected}, got `{value}`")]
    Type { key: String, expected: Kind, value: String, origin: Origin },
    #[error("{origin}: expected `key = value`, got `{text}`")]
    Syntax { text: String, origin: Origin },
    #[error("cannot read config file {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: &'static str,
}

macro_rules! keys {
    ($($key:literal : $kind:ident = $default:literal),* $(,)?) => {
        &[$(KeySpec { key: $key, kind: Kind::$kind, default: $default }),*]
    };
}

const KEYS: &[KeySpec] = keys![
    "seed": Int = "0",
    "checked": Bool = "true",
    "env.kind": Str = "gridbasic",
    "env.frame_skip": Int = "4",
    "env.gridbasic.width": Int = "11",
    "env.gridbasic.cell_units": Int = "5",
    "env.gridbasic.living_reward": Float = "-1.0",
    "env.gridbasic.miss_penalty": Float = "-5.0",
    "env.gridbasic.kill_reward": Float = "101.0",
    "env.gridbasic.max_tics": Int = "300",
    "env.gridbasic.monster_health": Int = "1",
    "env.hallway.length": Int = "6",
    "env.hallway.max_tics": Int = "60",
    "env.hallway.success_reward": Float = "1.0",
    "env.deathmatch.size": Int = "9",
    "env.deathmatch.enemies": Int = "3",
    "env.deathmatch.enemy_health": Int = "1",
    "env.deathmatch.enemy_damage": Int = "10",
    "env.deathmatch.enemy_move_prob": Float = "0.5",
    "env.deathmatch.enemy_shoot_prob": Float = "0.1",
    "env.deathmatch.enemy_range": Int = "4",
    "env.deathmatch.enemy_respawn_tics": Int = "30",
    "env.deathmatch.start_health": Int = "100",
    "env.deathmatch.start_ammo": Int = "20",
    "env.deathmatch.max_ammo": Int = "50",
    "env.deathmatch.health_packs": Int = "2",
    "env.deathmatch.ammo_packs": Int = "2",
    "env.deathmatch.health_pack_amount": Int = "25",
    "env.deathmatch.ammo_pack_amount": Int = "10",
    "env.deathmatch.pickup_respawn_tics": Int = "60",
    "env.deathmatch.view_depth": Int = "4",
    "env.deathmatch.max_tics": Int = "1000",
    "env.deathmatch.kill_reward": Float = "1.0",
    "env.deathmatch.death_reward": Float = "-1.0",
    "env.deathmatch.pickup_reward": Float = "0.1",
    "env.deathmatch.health_loss_reward": Float = "-0.05",
    "env.deathmatch.wasted_shot_reward": Float = "-0.02",
    "env.deathmatch.living_reward": Float = "0.0",
    "dtqn.d_model": Int = "64",
    "dtqn.n_heads": Int = "8",
    "dtqn.n_layers": Int = "5",
    "dtqn.d_ff": Int = "256",
    "dtqn.context_len": Int = "50",
    "dtqn.gating": Str = "gru",
    "dtqn.filters1": Int = "8",
    "dtqn.filters2": Int = "16",
    "dtqn.total_steps": Int = "50000",
    "dtqn.gamma": Float = "0.99",
    "dtqn.lr": Float = "3e-4",
    "dtqn.batch_size": Int = "32",
    "dtqn.train_interval": Int = "4",
    "dtqn.buffer_capacity": Int = "100000",
    "dtqn.target_sync": Int = "1000",
    "dtqn.eps_start": Float = "1.0",
    "dtqn.eps_end": Float = "0.05",
    "dtqn.eps_anneal_steps": Int = "20000",
    "dtqn.learning_starts": Int = "1000",
    "dtqn.aux_weight": Float = "0.5",
    "dtqn.grad_clip": Float = "10.0",
    "drqn.embed": Int = "64",
    "drqn.hidden": Int = "64",
    "drqn.context_len": Int = "50",
    "drqn.filters1": Int = "8",
    "drqn.filters2": Int = "16",
    "drqn.total_steps": Int = "50000",
    "drqn.gamma": Float = "0.99",
    "drqn.lr": Float = "3e-4",
    "drqn.batch_size": Int = "32",
    "drqn.train_interval": Int = "4",
    "drqn.buffer_capacity": Int = "100000",
    "drqn.target_sync": Int = "1000",
    "drqn.eps_start": Float = "1.0",
    "drqn.eps_end": Float = "0.05",
    "drqn.eps_anneal_steps": Int = "20000",
    "drqn.learning_starts": Int = "1000",
    "drqn.aux_weight": Float = "0.5",
    "drqn.grad_clip": Float = "10.0",
    "ppo.total_steps": Int = "90000",
    "ppo.n_envs": Int = "4",
    "ppo.horizon": Int = "2048",
    "ppo.epochs": Int = "4",
    "ppo.minibatch": Int = "256",
    "ppo.lr": Float = "1e-3",
    "ppo.gamma": Float = "0.99",
    "ppo.lambda": Float = "0.95",
    "ppo.clip": Float = "0.2",
    "ppo.vf_coef": Float = "0.5",
    "ppo.ent_coef": Float = "0.01",
    "ppo.grad_clip": Float = "0.5",
    "ppo.normalize_rewards": Bool = "true",
    "ppo.hidden": Int = "64",
    "dt.d_model": Int = "64",
    "dt.n_heads": Int = "8",
    "dt.n_layers": Int = "5",
    "dt.d_ff": Int = "256",
    "dt.context_len": Int = "90",
    "dt.gating": Str = "gru",
    "dt.filters1": Int = "8",
    "dt.filters2": Int = "16",
    "dt.rtg_scale": Float = "100.0",
    "dt.epochs": Int = "100",
    "dt.batch_size": Int = "64",
    "dt.lr": Float = "1e-4",
    "dt.gamma": Float = "1.0",
    "dt.grad_clip": Float = "1.0",
    "dt.target_return": Float = "110.0",
    "dt.temperature": Float = "0.0",
    "dt.max_steps": Int = "10000",
    "dt.dataset": Str = "",
    "collect.policy": Str = "expert",
    "collect.episodes": Int = "1000",
    "collect.greedy": Bool = "false",
    "eval.episodes": Int = "100",
    "eval.epsilon": Float = "0.0",
    "plot.column": Str = "return",
    "plot.window": Int = "1",
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

fn parse_value(kind: Kind, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    match kind {
        Kind::Int => raw.parse().ok().map(Value::Int),
        Kind::Float => raw.parse::<f64>().ok().filter(|v| v.is_finite()).map(Value::Float),
        Kind::Bool => raw.parse().ok().map(Value::Bool),
        Kind::Str => Some(Value::Str(raw.to_string())),
    }
}

/// Fully resolved settings, one entry per registered key.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, Value>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|s| (s.key, parse_value(s.kind, s.default).expect("registry default parses")))
            .collect();
        Config { values }
    }
}

impl Config {
    /// Defaults, overlaid by `file` (if any), overlaid by `flags` (`key=value`).
    pub fn load(file: Option<&Path>, flags: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (i, flag) in flags.iter().enumerate() {
            let origin = Origin::Flag { index: i + 1 };
            let (k, v) = flag.split_once('=').ok_or_else(|| ConfigError::Syntax {
                text: flag.clone(),
                origin: origin.clone(),
            })?;
            cfg.set(k.trim(), v, origin)?;
        }
        Ok(cfg)
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let origin = Origin::File {
                path: source.to_string(),
                line: i + 1,
            };
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                text: body.to_string(),
                origin: origin.clone(),
            })?;
            self.set(k.trim(), v, origin)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str, origin: Origin) -> Result<(), ConfigError> {
        let s = spec(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.to_string(),
            origin: origin.clone(),
        })?;
        let v = parse_value(s.kind, raw).ok_or_else(|| ConfigError::Type {
            key: key.to_string(),
            expected: s.kind,
            value: raw.trim().to_string(),
            origin,
        })?;
        self.values.insert(s.key, v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    fn value(&self, key: &str, kind: Kind) -> &Value {
        let v = self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a registered config key"));
        debug_assert_eq!(spec(key).map(|s| s.kind), Some(kind));
        v
    }

    pub fn int(&self, key: &str) -> i64 {
        match self.value(key, Kind::Int) {
            Value::Int(v) => *v,
            v => panic!("`{key}` holds {v:?}"),
        }
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.value(key, Kind::Float) {
            Value::Float(v) => *v,
            v => panic!("`{key}` holds {v:?}"),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.value(key, Kind::Bool) {
            Value::Bool(v) => *v,
            v => panic!("`{key}` holds {v:?}"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.value(key, Kind::Str) {
            Value::Str(v) => v,
            v => panic!("`{key}` holds {v:?}"),
        }
    }

    fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        usize::try_from(self.int(key)).map_err(|_| Self::invalid(key, "must be non-negative"))
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        u64::try_from(self.int(key)).map_err(|_| Self::invalid(key, "must be non-negative"))
    }

    pub fn u32(&self, key: &str) -> Result<u32, ConfigError> {
        u32::try_from(self.int(key)).map_err(|_| Self::invalid(key, "must fit in 0..2^32"))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.u64("seed")
    }

    /// Every key with its resolved value, one `key = value` line each. The
    /// output parses back to the same config.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn env(&self) -> Result<EnvConfig, ConfigError> {
        let kind: EnvKind = self
            .str("env.kind")
            .parse()
            .map_err(|e: seqrl::Error| Self::invalid("env.kind", e.to_string()))?;
        let g = "env.gridbasic.";
        let h = "env.hallway.";
        let d = "env.deathmatch.";
        let k = |p: &str, s: &str| format!("{p}{s}");
        Ok(EnvConfig {
            kind,
            frame_skip: self.u32("env.frame_skip")?,
            gridbasic: GridBasicConfig {
                width: self.usize(&k(g, "width"))?,
                cell_units: self.usize(&k(g, "cell_units"))?,
                living_reward: self.float(&k(g, "living_reward")),
                miss_penalty: self.float(&k(g, "miss_penalty")),
                kill_reward: self.float(&k(g, "kill_reward")),
                max_tics: self.u32(&k(g, "max_tics"))?,
                monster_health: self.u32(&k(g, "monster_health"))?,
            },
            hallway: HallwayConfig {
                length: self.usize(&k(h, "length"))?,
                max_tics: self.u32(&k(h, "max_tics"))?,
                success_reward: self.float(&k(h, "success_reward")),
            },
            deathmatch: DeathmatchConfig {
                size: self.usize(&k(d, "size"))?,
                enemies: self.usize(&k(d, "enemies"))?,
                enemy_health: self.u32(&k(d, "enemy_health"))?,
                enemy_damage: self.u32(&k(d, "enemy_damage"))?,
                enemy_move_prob: self.float(&k(d, "enemy_move_prob")),
                enemy_shoot_prob: self.float(&k(d, "enemy_shoot_prob")),
                enemy_range: self.usize(&k(d, "enemy_range"))?,
                enemy_respawn_tics: self.u32(&k(d, "enemy_respawn_tics"))?,
                start_health: self.u32(&k(d, "start_health"))?,
                start_ammo: self.u32(&k(d, "start_ammo"))?,
                max_ammo: self.u32(&k(d, "max_ammo"))?,
                health_packs: self.usize(&k(d, "health_packs"))?,
                ammo_packs: self.usize(&k(d, "ammo_packs"))?,
                health_pack_amount: self.u32(&k(d, "health_pack_amount"))?,
                ammo_pack_amount: self.u32(&k(d, "ammo_pack_amount"))?,
                pickup_respawn_tics: self.u32(&k(d, "pickup_respawn_tics"))?,
                view_depth: self.usize(&k(d, "view_depth"))?,
                max_tics: self.u32(&k(d, "max_tics"))?,
                kill_reward: self.float(&k(d, "kill_reward")),
                death_reward: self.float(&k(d, "death_reward")),
                pickup_reward: self.float(&k(d, "pickup_reward")),
                health_loss_reward: self.float(&k(d, "health_loss_reward")),
                wasted_shot_reward: self.float(&k(d, "wasted_shot_reward")),
                living_reward: self.float(&k(d, "living_reward")),
            },
        })
    }

    fn transformer(&self, p: &str) -> Result<TransformerConfig, ConfigError> {
        let key = format!("{p}.gating");
        let gating: Gating = self
            .str(&key)
            .parse()
            .map_err(|e: seqrl::Error| Self::invalid(&key, e.to_string()))?;
        Ok(TransformerConfig {
            d_model: self.usize(&format!("{p}.d_model"))?,
            n_heads: self.usize(&format!("{p}.n_heads"))?,
            n_layers: self.usize(&format!("{p}.n_layers"))?,
            d_ff: self.usize(&format!("{p}.d_ff"))?,
            context_len: self.usize(&format!("{p}.context_len"))?,
            gating,
        })
    }

    /// Q-learning loop settings under `dtqn.` or `drqn.`.
    pub fn qlearn(&self, p: &str) -> Result<QLearnConfig, ConfigError> {
        let k = |s: &str| format!("{p}.{s}");
        Ok(QLearnConfig {
            total_steps: self.u64(&k("total_steps"))?,
            gamma: self.float(&k("gamma")),
            lr: self.float(&k("lr")),
            batch_size: self.usize(&k("batch_size"))?,
            train_interval: self.u64(&k("train_interval"))?,
            buffer_capacity: self.usize(&k("buffer_capacity"))?,
            target_sync: self.u64(&k("target_sync"))?,
            eps_start: self.float(&k("eps_start")),
            eps_end: self.float(&k("eps_end")),
            eps_anneal_steps: self.u64(&k("eps_anneal_steps"))?,
            learning_starts: self.u64(&k("learning_starts"))?,
            aux_weight: self.float(&k("aux_weight")),
            grad_clip: self.float(&k("grad_clip")),
            checked: self.bool("checked"),
            seed: self.seed()?,
        })
    }

    pub fn dtqn_model(&self) -> Result<DtqnConfig, ConfigError> {
        Ok(DtqnConfig {
            transformer: self.transformer("dtqn")?,
            filters1: self.usize("dtqn.filters1")?,
            filters2: self.usize("dtqn.filters2")?,
        })
    }

    pub fn drqn_model(&self) -> Result<DrqnConfig, ConfigError> {
        Ok(DrqnConfig {
            embed: self.usize("drqn.embed")?,
            hidden: self.usize("drqn.hidden")?,
            filters1: self.usize("drqn.filters1")?,
            filters2: self.usize("drqn.filters2")?,
            context_len: self.usize("drqn.context_len")?,
        })
    }

    pub fn ppo(&self) -> Result<PpoConfig, ConfigError> {
        Ok(PpoConfig {
            total_steps: self.u64("ppo.total_steps")?,
            n_envs: self.usize("ppo.n_envs")?,
            horizon: self.usize("ppo.horizon")?,
            epochs: self.usize("ppo.epochs")?,
            minibatch: self.usize("ppo.minibatch")?,
            lr: self.float("ppo.lr"),
            gamma: self.float("ppo.gamma"),
            lambda: self.float("ppo.lambda"),
            clip: self.float("ppo.clip"),
            vf_coef: self.float("ppo.vf_coef"),
            ent_coef: self.float("ppo.ent_coef"),
            grad_clip: self.float("ppo.grad_clip"),
            normalize_rewards: self.bool("ppo.normalize_rewards"),
            hidden: self.usize("ppo.hidden")?,
            checked: self.bool("checked"),
            seed: self.seed()?,
        })
    }

    pub fn dt_model(&self) -> Result<DtConfig, ConfigError> {
        Ok(DtConfig {
            transformer: self.transformer("dt")?,
            filters1: self.usize("dt.filters1")?,
            filters2: self.usize("dt.filters2")?,
            rtg_scale: self.float("dt.rtg_scale"),
        })
    }

    pub fn dt_train(&self) -> Result<DtTrainConfig, ConfigError> {
        Ok(DtTrainConfig {
            epochs: self.usize("dt.epochs")?,
            batch_size: self.usize("dt.batch_size")?,
            lr: self.float("dt.lr"),
            gamma: self.float("dt.gamma"),
            grad_clip: self.float("dt.grad_clip"),
            checked: self.bool("checked"),
            seed: self.seed()?,
        })
    }

    pub fn dt_rollout(&self) -> Result<RolloutConfig, ConfigError> {
        Ok(RolloutConfig {
            target_return: self.float("dt.target_return"),
            gamma: self.float("dt.gamma"),
            max_steps: self.usize("dt.max_steps")?,
            frame_skip: self.u32("env.frame_skip")?,
            temperature: self.float("dt.temperature"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_defaults_match_library_defaults() {
        let c = Config::default();
        assert_eq!(c.env().unwrap(), EnvConfig::default());
        assert_eq!(c.dtqn_model().unwrap(), DtqnConfig::default());
        assert_eq!(c.qlearn("dtqn").unwrap(), QLearnConfig::default());
        assert_eq!(c.qlearn("drqn").unwrap(), QLearnConfig::default());
        assert_eq!(c.drqn_model().unwrap(), DrqnConfig::default());
        assert_eq!(c.ppo().unwrap(), PpoConfig::default());
        assert_eq!(c.dt_model().unwrap(), DtConfig::default());
        assert_eq!(c.dt_train().unwrap(), DtTrainConfig::default());
    }
}
