use crate::dtqn::{aux_features_loss, QOutput, SequenceQNet};
use crate::envs::GameFeatures;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{encode_observations, EncoderConfig, EncoderParams, Linear, SeqLayout};

use super::lstm::{lstm_cell, LstmParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrqnConfig {
    /// Width of the per-frame embedding fed to the LSTM.
    pub embed: usize,
    pub hidden: usize,
    pub filters1: usize,
    pub filters2: usize,
    /// Frames the recurrence is unrolled over.
    pub context_len: usize,
}

impl Default for DrqnConfig {
    fn default() -> Self {
        DrqnConfig {
            embed: 64,
            hidden: 64,
            filters1: 8,
            filters2: 16,
            context_len: 50,
        }
    }
}

/// Conv encoder, one LSTM layer unrolled from a zero state, and linear heads
/// for Q-values and game features.
#[derive(Debug, Clone, PartialEq)]
pub struct DrqnModel {
    pub cfg: DrqnConfig,
    pub n_actions: usize,
    pub encoder: EncoderParams,
    pub lstm: LstmParams,
    pub q_head: Linear,
    pub feature_head: Linear,
}

impl DrqnModel {
    pub fn init(store: &mut ParamStore, obs_shape: [usize; 3], n_actions: usize, cfg: DrqnConfig, rng: &mut Rng) -> Result<Self> {
        if n_actions == 0 || cfg.context_len == 0 {
            return Err(Error::Config("drqn needs actions and a positive context".into()));
        }
        let encoder = EncoderParams::init(
            store,
            "drqn.enc",
            EncoderConfig {
                obs_shape,
                filters1: cfg.filters1,
                filters2: cfg.filters2,
                d_model: cfg.embed,
            },
            rng,
        )?;
        let lstm = LstmParams::init(store, "drqn.lstm", cfg.embed, cfg.hidden, rng)?;
        Ok(DrqnModel {
            cfg,
            n_actions,
            encoder,
            lstm,
            q_head: Linear::init(store, "drqn.q", cfg.hidden, n_actions, rng),
            feature_head: Linear::init(store, "drqn.features", cfg.hidden, GameFeatures::LEN, rng),
        })
    }
}

impl SequenceQNet for DrqnModel {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn obs_shape(&self) -> [usize; 3] {
        self.encoder.cfg.obs_shape
    }

    fn context_len(&self) -> usize {
        self.cfg.context_len
    }

    /// Sequences are unrolled side by side. The state is held at zero until
    /// each sequence's first real slot, so left padding has no effect.
    fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var, layout: &SeqLayout) -> Result<QOutput> {
        let (n, len, hid) = (layout.n_seq, layout.seq_len, self.cfg.hidden);
        if len == 0 || len > self.context_len() {
            return Err(Error::dim(format!("sequence length {len}; context holds 1..={}", self.context_len())));
        }
        let x = encode_observations(g, store, frames, &self.encoder)?;
        let zero = Tensor::zeros(&[n, hid]);
        let mut h = g.constant(zero.clone());
        let mut c = g.constant(zero);
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let rows: Vec<usize> = (0..n).map(|s| s * len + t).collect();
            let xt = g.gather_rows(x, &rows)?;
            let (h2, c2) = lstm_cell(g, store, xt, h, c, &self.lstm)?;
            if layout.key_start.iter().any(|&k| t < k) {
                let live: Vec<f64> = layout
                    .key_start
                    .iter()
                    .flat_map(|&k| std::iter::repeat(if t >= k { 1.0 } else { 0.0 }).take(hid))
                    .collect();
                let m = g.constant(Tensor::new(vec![n, hid], live)?);
                h = g.mul(h2, m)?;
                c = g.mul(c2, m)?;
            } else {
                h = h2;
                c = c2;
            }
            steps.push(h);
        }
        // rows come out time-major; reorder to sequence-major
        let stacked = g.concat_rows(&steps)?;
        let perm: Vec<usize> = (0..n * len).map(|r| (r % len) * n + r / len).collect();
        let emb = g.gather_rows(stacked, &perm)?;
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

/// Build a fresh recurrent baseline and train it with the shared Q-learning loop.
pub fn train_drqn(
    env_cfg: &crate::envs::EnvConfig,
    model_cfg: DrqnConfig,
    cfg: &crate::dtqn::QLearnConfig,
    on_row: &mut dyn FnMut(&crate::metrics::MetricsRow) -> Result<()>,
) -> Result<(DrqnModel, ParamStore, crate::dtqn::TrainLog)> {
    use crate::rng::{derive_seed, rng_from_seed};
    let env = env_cfg.build()?;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xD291));
    let model = DrqnModel::init(&mut store, env.obs_shape(), env.num_actions(), model_cfg, &mut rng)?;
    let log = crate::dtqn::train_q_agent(&model, &mut store, env_cfg, cfg, on_row)?;
    Ok((model, store, log))
}
