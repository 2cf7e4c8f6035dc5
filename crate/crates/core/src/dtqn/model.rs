use crate::envs::GameFeatures;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{
    encode_observations, EncoderConfig, EncoderParams, Linear, SeqLayout, TransformerConfig, TransformerStack,
};

/// Outputs of a sequence Q-network over `n_seq * seq_len` rows.
#[derive(Debug, Clone, Copy)]
pub struct QOutput {
    pub q: Var,
    /// Per-row embedding fed to the heads.
    pub emb: Var,
}

/// Anything that maps a batch of left-padded observation windows to per-slot
/// Q-values. Both the transformer agent and the recurrent baseline implement
/// it, so they share the replay buffer, targets and training loop.
pub trait SequenceQNet {
    fn n_actions(&self) -> usize;
    fn obs_shape(&self) -> [usize; 3];
    fn context_len(&self) -> usize;

    /// `frames` is `[n_seq * seq_len, C, H, W]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var, layout: &SeqLayout) -> Result<QOutput>;

    /// Auxiliary loss over the embeddings, if the model has one.
    fn aux_loss(
        &self,
        _g: &mut Graph,
        _store: &ParamStore,
        _out: &QOutput,
        _features: &[f64],
        _mask: &[bool],
    ) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Evaluate Q on one unpadded window `[T, C, H, W]`; returns `[T, |A|]`.
pub fn q_window<M: SequenceQNet + ?Sized>(model: &M, store: &ParamStore, window: &Tensor) -> Result<Tensor> {
    let t = window.shape().first().copied().unwrap_or(0);
    if t == 0 || t > model.context_len() {
        return Err(Error::dim(format!(
            "window of {t} frames; context holds 1..={}",
            model.context_len()
        )));
    }
    let mut g = Graph::new(false);
    let frames = g.constant(window.clone());
    let out = model.forward(&mut g, store, frames, &SeqLayout::single(t))?;
    Ok(g.value(out.q).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtqnConfig {
    pub transformer: TransformerConfig,
    pub filters1: usize,
    pub filters2: usize,
}

impl Default for DtqnConfig {
    fn default() -> Self {
        DtqnConfig {
            transformer: TransformerConfig::default(),
            filters1: 8,
            filters2: 16,
        }
    }
}

/// Conv encoder, positional encoding, causal transformer, and two linear
/// heads: Q-values and the three game features.
#[derive(Debug, Clone, PartialEq)]
pub struct DtqnModel {
    pub cfg: DtqnConfig,
    pub n_actions: usize,
    pub encoder: EncoderParams,
    pub stack: TransformerStack,
    pub q_head: Linear,
    pub feature_head: Linear,
}

impl DtqnModel {
    pub fn init(store: &mut ParamStore, obs_shape: [usize; 3], n_actions: usize, cfg: DtqnConfig, rng: &mut Rng) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::Config("model needs at least one action".into()));
        }
        let d = cfg.transformer.d_model;
        let encoder = EncoderParams::init(
            store,
            "dtqn.enc",
            EncoderConfig {
                obs_shape,
                filters1: cfg.filters1,
                filters2: cfg.filters2,
                d_model: d,
            },
            rng,
        )?;
        let stack = TransformerStack::init(store, "dtqn.tf", cfg.transformer, rng)?;
        Ok(DtqnModel {
            cfg,
            n_actions,
            encoder,
            stack,
            q_head: Linear::init(store, "dtqn.q", d, n_actions, rng),
            feature_head: Linear::init(store, "dtqn.features", d, GameFeatures::LEN, rng),
        })
    }

    /// Q-values `[T, |A|]` and embeddings `[T, d_model]` for one window.
    pub fn q_forward(&self, store: &ParamStore, window: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = window.shape().first().copied().unwrap_or(0);
        if t == 0 || t > self.context_len() {
            return Err(Error::dim(format!(
                "window of {t} frames; context holds 1..={}",
                self.context_len()
            )));
        }
        let mut g = Graph::new(false);
        let frames = g.constant(window.clone());
        let out = self.forward(&mut g, store, frames, &SeqLayout::single(t))?;
        Ok((g.value(out.q).clone(), g.value(out.emb).clone()))
    }
}

impl SequenceQNet for DtqnModel {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn obs_shape(&self) -> [usize; 3] {
        self.encoder.cfg.obs_shape
    }

    fn context_len(&self) -> usize {
        self.cfg.transformer.context_len
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var, layout: &SeqLayout) -> Result<QOutput> {
        if layout.seq_len > self.context_len() {
            return Err(Error::dim(format!(
                "sequence length {} exceeds context {}",
                layout.seq_len,
                self.context_len()
            )));
        }
        let x = encode_observations(g, store, frames, &self.encoder)?;
        let pos = g.constant(layout.positions(self.cfg.transformer.d_model)?);
        let x = g.add(x, pos)?;
        let emb = self.stack.forward(g, store, x, layout)?;
        let q = self.q_head.forward(g, store, emb)?;
        Ok(QOutput { q, emb })
    }

    fn aux_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        out: &QOutput,
        features: &[f64],
        mask: &[bool],
    ) -> Result<Option<Var>> {
        aux_features_loss(g, store, out.emb, &self.feature_head, features, mask).map(Some)
    }
}

/// MSE between predicted and true features on real slots.
pub fn aux_features_loss(
    g: &mut Graph,
    store: &ParamStore,
    emb: Var,
    head: &Linear,
    features: &[f64],
    mask: &[bool],
) -> Result<Var> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::State("every slot is padding".into()));
    }
    if features.len() != mask.len() * GameFeatures::LEN {
        return Err(Error::dim("features do not match mask length"));
    }
    let target: Vec<f64> = rows
        .iter()
        .flat_map(|&r| features[r * 3..r * 3 + 3].iter().copied())
        .collect();
    let e = g.gather_rows(emb, &rows)?;
    let pred = head.forward(g, store, e)?;
    g.mse(pred, &Tensor::new(vec![rows.len(), GameFeatures::LEN], target)?)
}
