use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::envs::{frame_skip_step, EnvConfig, Environment, Observation, Policy};
use crate::error::{Error, Result};
use crate::metrics::{mean, MetricsRow};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensorcore::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::transformer::Linear;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    /// Agent decisions summed over all environment copies.
    pub total_steps: u64,
    pub n_envs: usize,
    /// Transitions per rollout, split evenly across the copies.
    pub horizon: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub grad_clip: f64,
    /// Divide rewards by a running std of the discounted return.
    pub normalize_rewards: bool,
    pub hidden: usize,
    pub checked: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            total_steps: 90_000,
            n_envs: 4,
            horizon: 2048,
            epochs: 4,
            minibatch: 256,
            lr: 1e-3,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.01,
            grad_clip: 0.5,
            normalize_rewards: true,
            hidden: 64,
            checked: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_envs == 0 || self.horizon == 0 || self.epochs == 0 || self.minibatch == 0 || self.hidden == 0 {
            return bad("n_envs, horizon, epochs, minibatch and hidden must be positive");
        }
        if self.horizon % self.n_envs != 0 {
            return bad("horizon must be a multiple of n_envs");
        }
        if self.minibatch > self.horizon {
            return bad("minibatch cannot exceed horizon");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return bad("lr and clip must be positive");
        }
        if self.vf_coef < 0.0 || self.ent_coef < 0.0 || self.grad_clip < 0.0 {
            return bad("loss coefficients and grad_clip must be non-negative");
        }
        Ok(())
    }
}

/// Two-layer tanh MLP over the flattened observation with policy and value heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoModel {
    pub obs_shape: [usize; 3],
    pub n_actions: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub pi: Linear,
    pub v: Linear,
}

impl PpoModel {
    pub fn init(store: &mut ParamStore, obs_shape: [usize; 3], n_actions: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let d: usize = obs_shape.iter().product();
        if d == 0 || n_actions == 0 || hidden == 0 {
            return Err(Error::Config("ppo model sizes must be positive".into()));
        }
        let l1 = Linear::init(store, "ppo.l1", d, hidden, rng);
        let l2 = Linear::init(store, "ppo.l2", hidden, hidden, rng);
        let pi = Linear::init(store, "ppo.pi", hidden, n_actions, rng);
        // near-uniform initial policy
        store.get_mut(pi.w).data_mut().iter_mut().for_each(|w| *w *= 0.01);
        let v = Linear::init(store, "ppo.v", hidden, 1, rng);
        Ok(PpoModel { obs_shape, n_actions, l1, l2, pi, v })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_shape.iter().product()
    }

    /// `obs [N, C*H*W]` -> (logits `[N, |A|]`, values `[N]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: Var) -> Result<(Var, Var)> {
        let h = self.l1.forward(g, store, obs)?;
        let h = g.tanh(h)?;
        let h = self.l2.forward(g, store, h)?;
        let h = g.tanh(h)?;
        let logits = self.pi.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        let n = g.value(v).numel();
        let v = g.reshape(v, &[n])?;
        Ok((logits, v))
    }

    /// Action probabilities and values for a batch of raw observations.
    pub fn evaluate(&self, store: &ParamStore, obs: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.obs_dim();
        let n = obs.len() / d;
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::new(vec![n, d], obs.to_vec())?);
        let (logits, v) = self.forward(&mut g, store, x)?;
        let p = g.softmax(logits, 1)?;
        let probs = g.value(p).data().chunks(self.n_actions).map(<[f64]>::to_vec).collect();
        Ok((probs, g.value(v).data().to_vec()))
    }
}

/// Generalized advantage estimation over one environment's rollout.
/// `dones[t]` cuts the recursion after step t; `last_value` bootstraps the end.
pub fn ppo_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if values.len() != t || dones.len() != t {
        return Err(Error::dim(format!(
            "gae: {t} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; t];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for i in (0..t).rev() {
        let live = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * next_value * live - values[i];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[i] = next_adv;
        next_value = values[i];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Shift to mean 0 and scale to std 1 (left alone when the spread is ~0).
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let m = adv.iter().sum::<f64>() / n;
    let sd = (adv.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - m) / (sd + 1e-8));
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipCoeffs {
    pub clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Clipped surrogate plus value MSE minus an entropy bonus, from the new
/// policy's logits `[N, |A|]` and values `[N]`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_clip_loss(
    g: &mut Graph,
    logits: Var,
    values: Var,
    actions: &[usize],
    old_logp: &[f64],
    advantages: &[f64],
    value_targets: &[f64],
    c: ClipCoeffs,
) -> Result<PpoLoss> {
    let n = actions.len();
    if n == 0 || old_logp.len() != n || advantages.len() != n || value_targets.len() != n {
        return Err(Error::dim("ppo loss inputs must be non-empty and aligned"));
    }
    if [old_logp, advantages, value_targets].iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("ppo loss inputs".into()));
    }
    let logp_all = g.log_softmax(logits)?;
    let pairs: Vec<(usize, usize)> = actions.iter().copied().enumerate().collect();
    let logp = g.pick(logp_all, &pairs)?;
    let old = g.constant(Tensor::from_vec(old_logp.to_vec()));
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff)?;
    let a = g.constant(Tensor::from_vec(advantages.to_vec()));
    let s1 = g.mul(ratio, a)?;
    let clipped = g.clamp(ratio, 1.0 - c.clip, 1.0 + c.clip)?;
    let s2 = g.mul(clipped, a)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr)?;
    let policy = g.scale(surr, -1.0)?;

    let value = g.mse(values, &Tensor::from_vec(value_targets.to_vec()))?;

    let p = g.softmax(logits, 1)?;
    let plogp = g.mul(p, logp_all)?;
    let s = g.sum(plogp)?;
    let entropy = g.scale(s, -1.0 / n as f64)?;

    let vterm = g.scale(value, c.vf_coef)?;
    let eterm = g.scale(entropy, -c.ent_coef)?;
    let total = g.add(policy, vterm)?;
    let total = g.add(total, eterm)?;
    Ok(PpoLoss { total, policy, value, entropy })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoUpdate {
    /// Agent steps taken so far.
    pub step: u64,
    /// Mean return of episodes that finished during this rollout.
    pub mean_return: Option<f64>,
    /// Mean policy entropy over the rollout's decisions.
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoLog {
    pub rows: Vec<MetricsRow>,
    pub updates: Vec<PpoUpdate>,
}

fn obs_f64(o: &Observation) -> impl Iterator<Item = f64> + '_ {
    o.data().iter().map(|&v| v as f64)
}

fn sample(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Running variance of each copy's discounted return, used to rescale rewards.
#[derive(Debug, Clone)]
struct ReturnScaler {
    gamma: f64,
    returns: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ReturnScaler {
    fn new(n: usize, gamma: f64) -> Self {
        ReturnScaler { gamma, returns: vec![0.0; n], count: 0.0, mean: 0.0, m2: 0.0 }
    }

    fn scale(&mut self, env: usize, reward: f64, done: bool) -> f64 {
        let ret = self.returns[env] * self.gamma + reward;
        self.count += 1.0;
        let delta = ret - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (ret - self.mean);
        self.returns[env] = if done { 0.0 } else { ret };
        let var = if self.count > 1.0 { self.m2 / self.count } else { 1.0 };
        reward / (var + 1e-8).sqrt()
    }
}

struct Slot {
    env: Box<dyn Environment>,
    obs: Observation,
    episode: u64,
    ret: f64,
    kills: u32,
    deaths: u32,
}

fn ppo_episode_seed(seed: u64, env_index: usize, episode: u64) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, 0x990), env_index as u64), episode)
}

/// Synchronous PPO over `n_envs` environment copies. Episodes cut by the
/// time limit bootstrap from the value of their final observation.
pub fn train_ppo(
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<(PpoModel, ParamStore, PpoLog)> {
    cfg.validate()?;
    env_cfg.validate()?;
    let mut slots = Vec::with_capacity(cfg.n_envs);
    for i in 0..cfg.n_envs {
        let mut env = env_cfg.build()?;
        let obs = env.reset(ppo_episode_seed(cfg.seed, i, 0));
        slots.push(Slot { env, obs, episode: 0, ret: 0.0, kills: 0, deaths: 0 });
    }
    let obs_shape = slots[0].env.obs_shape();
    let n_actions = slots[0].env.num_actions();
    let mut store = ParamStore::new();
    let model = PpoModel::init(
        &mut store,
        obs_shape,
        n_actions,
        cfg.hidden,
        &mut rng_from_seed(derive_seed(cfg.seed, 0x9901)),
    )?;
    let mut adam = AdamState::new(&store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x9902));
    let d = model.obs_dim();
    let per_env = cfg.horizon / cfg.n_envs;
    let mut log = PpoLog::default();
    let mut step = 0u64;
    let mut episodes_done = 0u64;
    let mut last_loss: Option<f64> = None;
    let mut scaler = ReturnScaler::new(cfg.n_envs, cfg.gamma);

    while step < cfg.total_steps {
        let n = cfg.n_envs;
        // env-major storage: index = e * per_env + t
        let mut obs_buf = vec![0.0; cfg.horizon * d];
        let mut act_buf = vec![0usize; cfg.horizon];
        let mut logp_buf = vec![0.0; cfg.horizon];
        let mut val_buf = vec![0.0; cfg.horizon];
        let mut rew_buf = vec![0.0; cfg.horizon];
        let mut done_buf = vec![false; cfg.horizon];
        let mut ent_sum = 0.0;
        let mut finished = Vec::new();

        for t in 0..per_env {
            let batch: Vec<f64> = slots.iter().flat_map(|s| obs_f64(&s.obs)).collect();
            let (probs, values) = model.evaluate(&store, &batch)?;
            for (e, slot) in slots.iter_mut().enumerate() {
                let i = e * per_env + t;
                let a = sample(&probs[e], &mut rng);
                ent_sum += entropy(&probs[e]);
                obs_buf[i * d..(i + 1) * d].copy_from_slice(&batch[e * d..(e + 1) * d]);
                act_buf[i] = a;
                logp_buf[i] = probs[e][a].max(1e-300).ln();
                val_buf[i] = values[e];
                let r = frame_skip_step(slot.env.as_mut(), a, env_cfg.frame_skip)?;
                let mut reward = if cfg.normalize_rewards {
                    scaler.scale(e, r.reward, r.done)
                } else {
                    r.reward
                };
                slot.ret += r.reward;
                slot.kills += r.kills;
                slot.deaths += r.deaths;
                if r.timed_out {
                    let o: Vec<f64> = obs_f64(&r.observation).collect();
                    reward += cfg.gamma * model.evaluate(&store, &o)?.1[0];
                }
                rew_buf[i] = reward;
                done_buf[i] = r.done;
                step += 1;
                if r.done {
                    let row = MetricsRow {
                        step,
                        episode: episodes_done,
                        ret: Some(slot.ret),
                        loss: last_loss,
                        epsilon: None,
                        kills: Some(slot.kills),
                        deaths: Some(slot.deaths),
                    };
                    episodes_done += 1;
                    finished.push(slot.ret);
                    on_row(&row)?;
                    log.rows.push(row);
                    slot.episode += 1;
                    slot.obs = slot.env.reset(ppo_episode_seed(cfg.seed, e, slot.episode));
                    slot.ret = 0.0;
                    slot.kills = 0;
                    slot.deaths = 0;
                } else {
                    slot.obs = r.observation;
                }
            }
        }

        let last: Vec<f64> = slots.iter().flat_map(|s| obs_f64(&s.obs)).collect();
        let (_, last_values) = model.evaluate(&store, &last)?;
        let mut adv = Vec::with_capacity(cfg.horizon);
        let mut targets = Vec::with_capacity(cfg.horizon);
        for e in 0..n {
            let r = e * per_env..(e + 1) * per_env;
            let (a, tg) = ppo_gae(
                &rew_buf[r.clone()],
                &val_buf[r.clone()],
                &done_buf[r],
                last_values[e],
                cfg.gamma,
                cfg.lambda,
            )?;
            adv.extend(a);
            targets.extend(tg);
        }

        let coeffs = ClipCoeffs { clip: cfg.clip, vf_coef: cfg.vf_coef, ent_coef: cfg.ent_coef };
        let mut order: Vec<usize> = (0..cfg.horizon).collect();
        let (mut pl, mut vl, mut tl) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for mb in order.chunks(cfg.minibatch) {
                let m = mb.len();
                let x: Vec<f64> = mb.iter().flat_map(|&i| obs_buf[i * d..(i + 1) * d].iter().copied()).collect();
                let acts: Vec<usize> = mb.iter().map(|&i| act_buf[i]).collect();
                let old: Vec<f64> = mb.iter().map(|&i| logp_buf[i]).collect();
                let mut a: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
                normalize_advantages(&mut a);
                let tg: Vec<f64> = mb.iter().map(|&i| targets[i]).collect();

                let mut g = Graph::new(cfg.checked);
                let xv = g.constant(Tensor::new(vec![m, d], x)?);
                let (logits, values) = model.forward(&mut g, &store, xv)?;
                let loss = ppo_clip_loss(&mut g, logits, values, &acts, &old, &a, &tg, coeffs)?;
                g.backward(loss.total)?;
                let mut grads = g.param_grads(&store);
                if cfg.grad_clip > 0.0 {
                    grads.clip_global_norm(cfg.grad_clip);
                }
                adam.step(&mut store, &grads, cfg.checked)?;
                pl.push(g.value(loss.policy).item());
                vl.push(g.value(loss.value).item());
                tl.push(g.value(loss.total).item());
            }
        }
        last_loss = mean(&tl);
        log.updates.push(PpoUpdate {
            step,
            mean_return: mean(&finished),
            entropy: ent_sum / cfg.horizon as f64,
            policy_loss: mean(&pl).unwrap_or(0.0),
            value_loss: mean(&vl).unwrap_or(0.0),
        });
    }
    Ok((model, store, log))
}

/// A trained PPO network acting as a fixed behaviour policy.
#[derive(Debug, Clone)]
pub struct PpoPolicy<'a> {
    pub model: &'a PpoModel,
    pub store: &'a ParamStore,
    /// Take the most likely action instead of sampling.
    pub greedy: bool,
}

impl Policy for PpoPolicy<'_> {
    fn num_actions(&self) -> Option<usize> {
        Some(self.model.n_actions)
    }

    fn act(&mut self, obs: &Observation, rng: &mut Rng) -> Result<usize> {
        if obs.shape() != self.model.obs_shape {
            return Err(Error::dim(format!(
                "policy expects {:?}, got {:?}",
                self.model.obs_shape,
                obs.shape()
            )));
        }
        let x: Vec<f64> = obs_f64(obs).collect();
        let (probs, _) = self.model.evaluate(self.store, &x)?;
        Ok(if self.greedy {
            crate::dtqn::argmax(&probs[0])
        } else {
            sample(&probs[0], rng)
        })
    }
}
