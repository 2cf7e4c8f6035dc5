use super::Trajectory;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{
    encode_observations, positional_encoding, EncoderConfig, EncoderParams, Linear, SeqLayout, TransformerConfig,
    TransformerStack,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtConfig {
    /// `context_len` counts timesteps; the stack sees three tokens per step.
    pub transformer: TransformerConfig,
    pub filters1: usize,
    pub filters2: usize,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f64,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            transformer: TransformerConfig {
                context_len: 90,
                ..TransformerConfig::default()
            },
            filters1: 8,
            filters2: 16,
            rtg_scale: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtModel {
    pub cfg: DtConfig,
    pub n_actions: usize,
    pub encoder: EncoderParams,
    pub rtg_embed: Linear,
    /// `|A| + 1` rows; the last one stands for an action not taken yet.
    pub action_embed: ParamId,
    pub stack: TransformerStack,
    pub head: Linear,
}

impl DtModel {
    pub fn init(store: &mut ParamStore, obs_shape: [usize; 3], n_actions: usize, cfg: DtConfig, rng: &mut Rng) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::Config("model needs at least one action".into()));
        }
        if !(cfg.rtg_scale > 0.0) || !cfg.rtg_scale.is_finite() {
            return Err(Error::Config("rtg_scale must be positive".into()));
        }
        cfg.transformer.validate()?;
        let d = cfg.transformer.d_model;
        let encoder = EncoderParams::init(
            store,
            "dt.enc",
            EncoderConfig {
                obs_shape,
                filters1: cfg.filters1,
                filters2: cfg.filters2,
                d_model: d,
            },
            rng,
        )?;
        let rtg_embed = Linear::init(store, "dt.rtg", 1, d, rng);
        let action_embed = store.add_uniform("dt.action_embed", &[n_actions + 1, d], 1.0, rng);
        let stack_cfg = TransformerConfig {
            context_len: 3 * cfg.transformer.context_len,
            ..cfg.transformer
        };
        let stack = TransformerStack::init(store, "dt.tf", stack_cfg, rng)?;
        Ok(DtModel {
            cfg,
            n_actions,
            encoder,
            rtg_embed,
            action_embed,
            stack,
            head: Linear::init(store, "dt.head", d, n_actions, rng),
        })
    }

    pub fn context_len(&self) -> usize {
        self.cfg.transformer.context_len
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.encoder.cfg.obs_shape
    }

    pub fn placeholder_action(&self) -> usize {
        self.n_actions
    }
}

/// Left-padded windows of `len` timesteps, flattened as `[B, len, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DtBatch {
    pub batch_size: usize,
    pub len: usize,
    pub obs_shape: [usize; 3],
    pub observations: Vec<f64>,
    pub rtg: Vec<f64>,
    /// Taken actions; padding and not-yet-taken slots hold the placeholder.
    pub actions: Vec<usize>,
    pub mask: Vec<bool>,
    /// First real timestep of each window.
    pub key_start: Vec<usize>,
}

impl DtBatch {
    /// Windows `(trajectory, start, end)` with precomputed returns-to-go.
    pub fn from_windows(
        trajectories: &[Trajectory],
        rtgs: &[Vec<f64>],
        windows: &[(usize, usize, usize)],
        len: usize,
        placeholder: usize,
    ) -> Result<Self> {
        let obs_shape = trajectories
            .first()
            .map(|t| t.obs_shape)
            .ok_or_else(|| Error::State("no trajectories".into()))?;
        let frame: usize = obs_shape.iter().product();
        let b = windows.len();
        let mut batch = DtBatch {
            batch_size: b,
            len,
            obs_shape,
            observations: vec![0.0; b * len * frame],
            rtg: vec![0.0; b * len],
            actions: vec![placeholder; b * len],
            mask: vec![false; b * len],
            key_start: Vec::with_capacity(b),
        };
        for (i, &(ti, start, end)) in windows.iter().enumerate() {
            let traj = &trajectories[ti];
            if traj.obs_shape != obs_shape {
                return Err(Error::dim("trajectories have different observation shapes"));
            }
            if start >= end || end > traj.len() || end - start > len {
                return Err(Error::Index(format!(
                    "window {start}..{end} invalid for trajectory of {} steps and context {len}",
                    traj.len()
                )));
            }
            let pad = len - (end - start);
            batch.key_start.push(pad);
            for t in start..end {
                let row = i * len + pad + (t - start);
                for (dst, src) in batch.observations[row * frame..(row + 1) * frame]
                    .iter_mut()
                    .zip(traj.frame(t))
                {
                    *dst = *src as f64;
                }
                batch.rtg[row] = rtgs[ti][t];
                batch.actions[row] = traj.actions[t];
                batch.mask[row] = true;
            }
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.batch_size * self.len
    }
}

/// Action logits `[B·len, |A|]`, one row per timestep, read at state tokens.
pub fn dt_forward(g: &mut Graph, store: &ParamStore, model: &DtModel, batch: &DtBatch) -> Result<Var> {
    let (b, l) = (batch.batch_size, batch.len);
    let d = model.cfg.transformer.d_model;
    if l == 0 || l > model.context_len() {
        return Err(Error::dim(format!(
            "window of {l} steps; context holds 1..={}",
            model.context_len()
        )));
    }
    if batch.obs_shape != model.obs_shape() {
        return Err(Error::dim("batch observations do not match the encoder"));
    }
    if let Some(&a) = batch.actions.iter().find(|&&a| a > model.n_actions) {
        return Err(Error::Index(format!("action {a} outside 0..={}", model.n_actions)));
    }
    let rows = b * l;
    let [c, h, w] = batch.obs_shape;
    let frames = g.constant(Tensor::new(vec![rows, c, h, w], batch.observations.clone())?);
    let states = encode_observations(g, store, frames, &model.encoder)?;
    let scaled: Vec<f64> = batch.rtg.iter().map(|r| r / model.cfg.rtg_scale).collect();
    let rtg_in = g.constant(Tensor::new(vec![rows, 1], scaled)?);
    let returns = model.rtg_embed.forward(g, store, rtg_in)?;
    let table = g.param(store, model.action_embed);
    let actions = g.gather_rows(table, &batch.actions)?;

    // blocks [returns; states; actions] -> per sequence (R_t, s_t, a_t) triples
    let stacked = g.concat_rows(&[returns, states, actions])?;
    let mut order = Vec::with_capacity(3 * rows);
    for s in 0..b {
        for t in 0..l {
            for k in 0..3 {
                order.push(k * rows + s * l + t);
            }
        }
    }
    let tokens = g.gather_rows(stacked, &order)?;

    let pe = positional_encoding(l, d)?;
    let mut pos = Vec::with_capacity(3 * rows * d);
    for s in 0..b {
        for t in 0..l {
            let p = t.saturating_sub(batch.key_start[s]);
            for _ in 0..3 {
                pos.extend_from_slice(&pe.data()[p * d..(p + 1) * d]);
            }
        }
    }
    let pos = g.constant(Tensor::new(vec![3 * rows, d], pos)?);
    let tokens = g.add(tokens, pos)?;

    let layout = SeqLayout::causal(b, 3 * l, batch.key_start.iter().map(|k| 3 * k).collect());
    let out = model.stack.forward(g, store, tokens, &layout)?;
    let state_rows: Vec<usize> = (0..rows).map(|r| 3 * r + 1).collect();
    let at_states = g.gather_rows(out, &state_rows)?;
    model.head.forward(g, store, at_states)
}

/// Cross-entropy of `logits` against `actions` on real slots.
pub fn dt_loss(g: &mut Graph, logits: Var, actions: &[usize], mask: &[bool]) -> Result<Var> {
    if actions.len() != mask.len() {
        return Err(Error::dim("actions and mask must align"));
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::State("every slot is padding".into()));
    }
    let targets: Vec<usize> = rows.iter().map(|&r| actions[r]).collect();
    let sel = g.gather_rows(logits, &rows)?;
    g.cross_entropy(sel, &targets)
}
