use rand::seq::SliceRandom;
use rand::Rng as _;

use super::model::{dt_forward, dt_loss, DtBatch, DtConfig, DtModel};
use super::Trajectory;
use crate::error::{Error, Result};
use crate::metrics::{mean, MetricsRow};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensorcore::{AdamConfig, AdamState, Graph, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct DtTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Discount for return-to-go labels.
    pub gamma: f64,
    pub grad_clip: f64,
    pub checked: bool,
    pub seed: u64,
}

impl Default for DtTrainConfig {
    fn default() -> Self {
        DtTrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            gamma: 1.0,
            grad_clip: 1.0,
            checked: true,
            seed: 0,
        }
    }
}

impl DtTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("dt epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("dt learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("dt gamma must lie in [0, 1]".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("dt grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DtTrainLog {
    pub epoch_losses: Vec<f64>,
    pub rows: Vec<MetricsRow>,
    pub grad_steps: u64,
}

/// One window per trajectory, in shuffled order. A trajectory longer than
/// `context` gets a uniformly drawn start among the offsets where a full
/// window fits; shorter ones are used whole.
pub fn sample_windows(trajectories: &[Trajectory], context: usize, rng: &mut Rng) -> Vec<(usize, usize, usize)> {
    let mut order: Vec<usize> = (0..trajectories.len()).filter(|&i| !trajectories[i].is_empty()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| {
            let t = trajectories[i].len();
            let w = t.min(context);
            let start = rng.gen_range(0..=t - w);
            (i, start, start + w)
        })
        .collect()
}

fn validate_dataset(trajectories: &[Trajectory], n_actions: usize) -> Result<[usize; 3]> {
    let shape = trajectories
        .iter()
        .find(|t| !t.is_empty())
        .map(|t| t.obs_shape)
        .ok_or_else(|| Error::State("dataset has no non-empty trajectory".into()))?;
    for (i, t) in trajectories.iter().enumerate() {
        if t.obs_shape != shape {
            return Err(Error::dim(format!("trajectory {i} has observation shape {:?}", t.obs_shape)));
        }
        if let Some(a) = t.actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::Index(format!("trajectory {i} has action {a} outside 0..{n_actions}")));
        }
    }
    Ok(shape)
}

/// Supervised action prediction over the dataset.
pub fn train_dt(
    trajectories: &[Trajectory],
    n_actions: usize,
    model_cfg: DtConfig,
    cfg: &DtTrainConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<(DtModel, ParamStore, DtTrainLog)> {
    cfg.validate()?;
    let shape = validate_dataset(trajectories, n_actions)?;
    let mut store = ParamStore::new();
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, 0xD7));
    let model = DtModel::init(&mut store, shape, n_actions, model_cfg, &mut init_rng)?;
    let log = train_dt_model(&model, &mut store, trajectories, cfg, on_row)?;
    Ok((model, store, log))
}

/// Train an existing model in place.
pub fn train_dt_model(
    model: &DtModel,
    store: &mut ParamStore,
    trajectories: &[Trajectory],
    cfg: &DtTrainConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<DtTrainLog> {
    cfg.validate()?;
    validate_dataset(trajectories, model.n_actions)?;
    let rtgs: Vec<Vec<f64>> = trajectories.iter().map(|t| t.rtg(cfg.gamma)).collect();
    let mut adam = AdamState::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xD8));
    let mut log = DtTrainLog::default();
    for epoch in 0..cfg.epochs {
        let windows = sample_windows(trajectories, model.context_len(), &mut rng);
        let mut losses = Vec::new();
        for chunk in windows.chunks(cfg.batch_size) {
            let len = chunk.iter().map(|w| w.2 - w.1).max().unwrap_or(1);
            let batch = DtBatch::from_windows(trajectories, &rtgs, chunk, len, model.placeholder_action())?;
            let mut g = Graph::new(cfg.checked);
            let logits = dt_forward(&mut g, store, model, &batch)?;
            let loss = dt_loss(&mut g, logits, &batch.actions, &batch.mask)?;
            g.backward(loss)?;
            let mut grads = g.param_grads(store);
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            adam.step(store, &grads, cfg.checked)?;
            losses.push(g.value(loss).item());
            log.grad_steps += 1;
        }
        let epoch_loss = mean(&losses).unwrap_or(f64::NAN);
        log.epoch_losses.push(epoch_loss);
        let row = MetricsRow {
            step: log.grad_steps,
            episode: epoch as u64,
            loss: Some(epoch_loss),
            ..MetricsRow::default()
        };
        on_row(&row)?;
        log.rows.push(row);
    }
    Ok(log)
}
