use rand::Rng as _;

use super::gridbasic::{LEFT, RIGHT, SHOOT};
use super::hallway::{DOWN, FORWARD, UP};
use super::{frame_skip_step, EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::metrics::EvalSummary;
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Maps the current observation to an action. Stateful policies clear their
/// memory in `reset`.
pub trait Policy {
    fn reset(&mut self) {}
    /// Size of the action set, when the policy knows it.
    fn num_actions(&self) -> Option<usize> {
        None
    }
    fn act(&mut self, obs: &Observation, rng: &mut Rng) -> Result<usize>;
}

#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub n_actions: usize,
}

impl Policy for RandomPolicy {
    fn num_actions(&self) -> Option<usize> {
        Some(self.n_actions)
    }

    fn act(&mut self, _obs: &Observation, rng: &mut Rng) -> Result<usize> {
        Ok(rng.gen_range(0..self.n_actions))
    }
}

/// Walks under the monster, then shoots.
#[derive(Clone, Debug, Default)]
pub struct GridBasicExpert;

impl Policy for GridBasicExpert {
    fn num_actions(&self) -> Option<usize> {
        Some(3)
    }

    fn act(&mut self, obs: &Observation, _rng: &mut Rng) -> Result<usize> {
        let agent = obs
            .cells(2)
            .first()
            .map(|c| c.1)
            .ok_or_else(|| Error::State("no agent in observation".into()))?;
        Ok(match obs.cells(1).first() {
            Some(&(_, m)) if m > agent => RIGHT,
            Some(&(_, m)) if m < agent => LEFT,
            _ => SHOOT,
        })
    }
}

/// Reads the cue on the first frame and walks to the matching goal.
#[derive(Clone, Debug, Default)]
pub struct HallwayOracle {
    goal_up: Option<bool>,
}

impl Policy for HallwayOracle {
    fn reset(&mut self) {
        self.goal_up = None;
    }

    fn act(&mut self, obs: &Observation, _rng: &mut Rng) -> Result<usize> {
        if let Some(&(row, _)) = obs.cells(1).first() {
            self.goal_up = Some(row == 0);
        }
        let up = self
            .goal_up
            .ok_or_else(|| Error::State("hallway cue never observed".into()))?;
        let (_, col) = obs
            .cells(2)
            .first()
            .copied()
            .ok_or_else(|| Error::State("no agent in observation".into()))?;
        Ok(if col + 1 < obs.shape()[2] {
            FORWARD
        } else if up {
            UP
        } else {
            DOWN
        })
    }
}

/// Seed of evaluation episode `episode` in a run seeded with `seed`.
pub fn eval_episode_seed(seed: u64, episode: u64) -> u64 {
    derive_seed(derive_seed(seed, EVAL_STREAM), episode)
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Run `episodes` complete episodes of `policy` with frame skipping.
pub fn evaluate_policy(
    policy: &mut dyn Policy,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let mut env = env_cfg.build()?;
    let mut rng = rng_from_seed(derive_seed(seed, EVAL_STREAM + 1));
    let mut summary = EvalSummary::default();
    for ep in 0..episodes {
        let mut obs = env.reset(eval_episode_seed(seed, ep as u64));
        policy.reset();
        let (mut ret, mut len) = (0.0, 0);
        while !env.is_done() {
            let a = policy.act(&obs, &mut rng)?;
            let r = frame_skip_step(env.as_mut(), a, env_cfg.frame_skip)?;
            ret += r.reward;
            len += 1;
            summary.kills += r.kills;
            summary.deaths += r.deaths;
            obs = r.observation;
        }
        summary.returns.push(ret);
        summary.lengths.push(len);
    }
    Ok(summary)
}
