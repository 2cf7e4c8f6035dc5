use std::collections::VecDeque;
use std::rc::Rc;

use rand::Rng as _;

use super::buffer::{SequenceReplayBuffer, Transition};
use super::learn::{argmax, bellman_targets, td_loss, EpsilonSchedule, SyncCounter};
use super::model::{q_window, DtqnConfig, DtqnModel, SequenceQNet};
use crate::envs::{eval_episode_seed, frame_skip_step, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::metrics::{mean, EvalSummary, MetricsRow};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensorcore::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::transformer::SeqLayout;

/// Hyperparameters of the online Q-learning loop shared by the transformer
/// agent and the recurrent baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct QLearnConfig {
    /// Agent decisions (each one `frame_skip + 1` tics).
    pub total_steps: u64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_interval: u64,
    pub buffer_capacity: usize,
    pub target_sync: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    pub learning_starts: u64,
    pub aux_weight: f64,
    pub grad_clip: f64,
    pub checked: bool,
    pub seed: u64,
}

impl Default for QLearnConfig {
    fn default() -> Self {
        QLearnConfig {
            total_steps: 50_000,
            gamma: 0.99,
            lr: 3e-4,
            batch_size: 32,
            train_interval: 4,
            buffer_capacity: 100_000,
            target_sync: 1000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 20_000,
            learning_starts: 1000,
            aux_weight: 0.5,
            grad_clip: 10.0,
            checked: true,
            seed: 0,
        }
    }
}

impl QLearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.train_interval == 0 || self.buffer_capacity == 0 || self.target_sync == 0 {
            return bad("batch_size, train_interval, buffer_capacity and target_sync must be positive");
        }
        for e in [self.eps_start, self.eps_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon must lie in [0, 1]");
            }
        }
        if self.aux_weight < 0.0 || self.grad_clip < 0.0 {
            return bad("aux_weight and grad_clip must be non-negative");
        }
        Ok(())
    }

    pub fn epsilon(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.eps_start,
            end: self.eps_end,
            steps: self.eps_anneal_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub td: f64,
    pub aux: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<MetricsRow>,
    pub losses: Vec<LossRecord>,
    pub grad_steps: u64,
}

/// Keeps the current episode's last `context_len` frames and picks actions.
#[derive(Debug, Clone)]
pub struct QActor {
    obs_shape: [usize; 3],
    context_len: usize,
    history: VecDeque<Rc<[f32]>>,
}

impl QActor {
    pub fn new(obs_shape: [usize; 3], context_len: usize) -> Self {
        QActor {
            obs_shape,
            context_len,
            history: VecDeque::with_capacity(context_len),
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn observe(&mut self, obs: Rc<[f32]>) {
        if self.history.len() == self.context_len {
            self.history.pop_front();
        }
        self.history.push_back(obs);
    }

    /// Q-values at the newest frame.
    pub fn q_values<M: SequenceQNet + ?Sized>(&self, model: &M, store: &ParamStore) -> Result<Vec<f64>> {
        let t = self.history.len();
        let mut shape = vec![t];
        shape.extend_from_slice(&self.obs_shape);
        let data = self
            .history
            .iter()
            .flat_map(|o| o.iter().map(|&v| v as f64))
            .collect();
        let q = q_window(model, store, &Tensor::new(shape, data)?)?;
        let a = model.n_actions();
        Ok(q.data()[(t - 1) * a..t * a].to_vec())
    }

    /// ε-greedy; the network is only evaluated when the greedy branch is taken.
    pub fn act<M: SequenceQNet + ?Sized>(
        &self,
        model: &M,
        store: &ParamStore,
        epsilon: f64,
        rng: &mut Rng,
    ) -> Result<usize> {
        if rng.gen::<f64>() < epsilon {
            Ok(rng.gen_range(0..model.n_actions()))
        } else {
            Ok(argmax(&self.q_values(model, store)?))
        }
    }
}

fn to_rc(obs: crate::envs::Observation) -> Rc<[f32]> {
    obs.into_data().into()
}

fn check_env<M: SequenceQNet + ?Sized>(model: &M, env: &dyn Environment) -> Result<()> {
    if env.obs_shape() != model.obs_shape() || env.num_actions() != model.n_actions() {
        return Err(Error::Config(format!(
            "model expects {:?} observations and {} actions; {} gives {:?} and {}",
            model.obs_shape(),
            model.n_actions(),
            env.kind(),
            env.obs_shape(),
            env.num_actions()
        )));
    }
    Ok(())
}

fn train_episode_seed(seed: u64, episode: u64) -> u64 {
    derive_seed(derive_seed(seed, 0x7A1), episode)
}

/// One gradient step on a sampled minibatch. Returns (td, aux) losses.
pub fn q_learning_step<M: SequenceQNet + ?Sized>(
    model: &M,
    store: &mut ParamStore,
    target: &ParamStore,
    adam: &mut AdamState,
    buffer: &SequenceReplayBuffer,
    cfg: &QLearnConfig,
    rng: &mut Rng,
) -> Result<(f64, Option<f64>)> {
    let shape = model.obs_shape();
    let len = model.context_len();
    let batch = buffer.sample(cfg.batch_size, len, shape, rng)?;
    let layout = SeqLayout::causal(batch.batch_size, len, batch.key_start.clone());
    let frame_shape = vec![batch.rows(), shape[0], shape[1], shape[2]];

    let targets = {
        let mut tg = Graph::new(false);
        let frames = tg.constant(Tensor::new(frame_shape.clone(), batch.next_observations.clone())?);
        let out = model.forward(&mut tg, target, frames, &layout)?;
        bellman_targets(&batch, tg.value(out.q), cfg.gamma)?
    };

    let mut g = Graph::new(cfg.checked);
    let frames = g.constant(Tensor::new(frame_shape, batch.observations.clone())?);
    let out = model.forward(&mut g, store, frames, &layout)?;
    let td = td_loss(&mut g, out.q, &batch.actions, &targets, &batch.mask)?;
    let mut loss = td;
    let mut aux_value = None;
    if cfg.aux_weight > 0.0 {
        if let Some(aux) = model.aux_loss(&mut g, store, &out, &batch.features, &batch.mask)? {
            aux_value = Some(g.value(aux).item());
            let scaled = g.scale(aux, cfg.aux_weight)?;
            loss = g.add(td, scaled)?;
        }
    }
    g.backward(loss)?;
    let mut grads = g.param_grads(store);
    if cfg.grad_clip > 0.0 {
        grads.clip_global_norm(cfg.grad_clip);
    }
    adam.step(store, &grads, cfg.checked)?;
    Ok((g.value(td).item(), aux_value))
}

/// Online ε-greedy Q-learning with a sequence replay buffer and a periodically
/// synced target copy. `on_row` sees each episode's metrics as it finishes.
pub fn train_q_agent<M: SequenceQNet + ?Sized>(
    model: &M,
    store: &mut ParamStore,
    env_cfg: &EnvConfig,
    cfg: &QLearnConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    env_cfg.validate()?;
    let mut env = env_cfg.build()?;
    check_env(model, env.as_ref())?;

    let mut target = store.clone();
    let mut adam = AdamState::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut buffer = SequenceReplayBuffer::new(cfg.buffer_capacity, model.obs_shape())?;
    let mut sync = SyncCounter::new(cfg.target_sync);
    let schedule = cfg.epsilon();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x51));
    let mut actor = QActor::new(model.obs_shape(), model.context_len());
    let mut log = TrainLog::default();

    let mut episode = 0u64;
    let mut obs = to_rc(env.reset(train_episode_seed(cfg.seed, episode)));
    let mut features = env.features();
    actor.observe(obs.clone());
    let (mut ep_return, mut kills, mut deaths) = (0.0, 0u32, 0u32);
    let mut pending_losses = Vec::new();

    for step in 0..cfg.total_steps {
        let epsilon = schedule.at(step);
        let action = actor.act(model, store, epsilon, &mut rng)?;
        let r = frame_skip_step(env.as_mut(), action, env_cfg.frame_skip)?;
        let next = to_rc(r.observation);
        buffer.push(Transition {
            obs: obs.clone(),
            action,
            reward: r.reward,
            next_obs: next.clone(),
            done: r.done && !r.timed_out,
            features,
            episode,
        })?;
        ep_return += r.reward;
        kills += r.kills;
        deaths += r.deaths;

        if r.done {
            let row = MetricsRow {
                step: step + 1,
                episode,
                ret: Some(ep_return),
                loss: mean(&pending_losses),
                epsilon: Some(epsilon),
                kills: Some(kills),
                deaths: Some(deaths),
            };
            pending_losses.clear();
            on_row(&row)?;
            log.rows.push(row);
            episode += 1;
            obs = to_rc(env.reset(train_episode_seed(cfg.seed, episode)));
            features = env.features();
            actor.reset();
            actor.observe(obs.clone());
            ep_return = 0.0;
            kills = 0;
            deaths = 0;
        } else {
            obs = next;
            features = r.features;
            actor.observe(obs.clone());
        }

        if step + 1 >= cfg.learning_starts && (step + 1) % cfg.train_interval == 0 {
            let (td, aux) = q_learning_step(model, store, &target, &mut adam, &buffer, cfg, &mut rng)?;
            let total = td + aux.map_or(0.0, |a| cfg.aux_weight * a);
            pending_losses.push(total);
            log.losses.push(LossRecord { step: step + 1, td, aux });
            log.grad_steps += 1;
            if sync.tick() {
                target.copy_from(store)?;
            }
        }
    }
    Ok(log)
}

/// Build a fresh transformer agent and train it.
pub fn train_dtqn(
    env_cfg: &EnvConfig,
    model_cfg: DtqnConfig,
    cfg: &QLearnConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<(DtqnModel, ParamStore, TrainLog)> {
    let env = env_cfg.build()?;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x1417));
    let model = DtqnModel::init(&mut store, env.obs_shape(), env.num_actions(), model_cfg, &mut rng)?;
    let log = train_q_agent(&model, &mut store, env_cfg, cfg, on_row)?;
    Ok((model, store, log))
}

/// Run a Q-agent for `episodes` episodes with a fixed ε.
pub fn evaluate_q_agent<M: SequenceQNet + ?Sized>(
    model: &M,
    store: &ParamStore,
    env_cfg: &EnvConfig,
    episodes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<EvalSummary> {
    let mut env = env_cfg.build()?;
    check_env(model, env.as_ref())?;
    let mut rng = rng_from_seed(derive_seed(seed, 0xE7A2));
    let mut actor = QActor::new(model.obs_shape(), model.context_len());
    let mut summary = EvalSummary::default();
    for ep in 0..episodes {
        actor.reset();
        actor.observe(to_rc(env.reset(eval_episode_seed(seed, ep as u64))));
        let (mut ret, mut len) = (0.0, 0);
        while !env.is_done() {
            let a = actor.act(model, store, epsilon, &mut rng)?;
            let r = frame_skip_step(env.as_mut(), a, env_cfg.frame_skip)?;
            ret += r.reward;
            len += 1;
            summary.kills += r.kills;
            summary.deaths += r.deaths;
            actor.observe(to_rc(r.observation));
        }
        summary.returns.push(ret);
        summary.lengths.push(len);
    }
    Ok(summary)
}
