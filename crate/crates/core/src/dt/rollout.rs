use rand::Rng as _;

use super::model::{dt_forward, DtBatch, DtModel};
use super::Trajectory;
use crate::dtqn::argmax;
use crate::envs::{eval_episode_seed, frame_skip_step, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::metrics::EvalSummary;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensorcore::{Graph, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub target_return: f64,
    /// Only recorded; the running return-to-go is decremented by the raw
    /// reward for every discount.
    pub gamma: f64,
    /// Cap on agent decisions.
    pub max_steps: usize,
    pub frame_skip: u32,
    /// 0 selects the argmax action; otherwise sample from softmax(logits / T).
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub ret: f64,
    pub trajectory: Trajectory,
    /// Ended by the environment's tic cap or by `max_steps`.
    pub timed_out: bool,
    pub kills: u32,
    pub deaths: u32,
}

fn sample_logits(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Play one episode from the environment's current (freshly reset) state,
/// conditioning on a running return-to-go that starts at `target_return`.
pub fn dt_rollout(
    env: &mut dyn Environment,
    first_obs: Vec<f32>,
    model: &DtModel,
    store: &ParamStore,
    cfg: &RolloutConfig,
    rng: &mut Rng,
) -> Result<RolloutResult> {
    if !cfg.target_return.is_finite() {
        return Err(Error::Config("target return must be finite".into()));
    }
    if env.obs_shape() != model.obs_shape() || env.num_actions() != model.n_actions {
        return Err(Error::Config(format!(
            "model expects {:?} observations and {} actions; {} gives {:?} and {}",
            model.obs_shape(),
            model.n_actions,
            env.kind(),
            env.obs_shape(),
            env.num_actions()
        )));
    }
    let shape = model.obs_shape();
    let mut traj = Trajectory {
        obs_shape: shape,
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    let mut rtg_hist: Vec<f64> = Vec::new();
    let mut obs = first_obs;
    let mut rtg = cfg.target_return;
    let (mut ret, mut kills, mut deaths) = (0.0, 0, 0);
    let k = model.context_len();
    let timed_out = loop {
        if traj.len() >= cfg.max_steps {
            break true;
        }
        traj.observations.extend_from_slice(&obs);
        rtg_hist.push(rtg);
        let t = traj.len() + 1;
        let start = t.saturating_sub(k);
        // the current action is still unknown: fill it with the placeholder
        let mut actions = traj.actions.clone();
        actions.push(model.placeholder_action());
        let frame: usize = shape.iter().product();
        let batch = DtBatch {
            batch_size: 1,
            len: t - start,
            obs_shape: shape,
            observations: traj.observations[start * frame..].iter().map(|&v| v as f64).collect(),
            rtg: rtg_hist[start..].to_vec(),
            actions: actions[start..].to_vec(),
            mask: vec![true; t - start],
            key_start: vec![0],
        };
        let mut g = Graph::new(false);
        let logits = dt_forward(&mut g, store, model, &batch)?;
        let a_n = model.n_actions;
        let last = &g.value(logits).data()[(t - start - 1) * a_n..(t - start) * a_n];
        let action = sample_logits(last, cfg.temperature, rng);

        let r = frame_skip_step(env, action, cfg.frame_skip)?;
        traj.actions.push(action);
        traj.rewards.push(r.reward);
        ret += r.reward;
        kills += r.kills;
        deaths += r.deaths;
        rtg -= r.reward;
        if r.done {
            break r.timed_out;
        }
        obs = r.observation.into_data();
    };
    Ok(RolloutResult {
        ret,
        trajectory: traj,
        timed_out,
        kills,
        deaths,
    })
}

/// Run `episodes` conditioned rollouts on fresh environment seeds.
pub fn evaluate_dt(
    model: &DtModel,
    store: &ParamStore,
    env_cfg: &EnvConfig,
    cfg: &RolloutConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let mut env = env_cfg.build()?;
    let mut rng = rng_from_seed(derive_seed(seed, 0xE7A3));
    let mut summary = EvalSummary::default();
    for ep in 0..episodes {
        let obs = env.reset(eval_episode_seed(seed, ep as u64)).into_data();
        let r = dt_rollout(env.as_mut(), obs, model, store, cfg, &mut rng)?;
        summary.returns.push(r.ret);
        summary.lengths.push(r.trajectory.len());
        summary.kills += r.kills;
        summary.deaths += r.deaths;
    }
    Ok(summary)
}
