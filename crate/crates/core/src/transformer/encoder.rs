use super::Linear;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamId, ParamStore, Var};

/// Two 3×3 stride-1 conv layers with ReLU, then a linear map to `d_model`.
/// Convolutions pad by one cell so small grids keep their extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub obs_shape: [usize; 3],
    pub filters1: usize,
    pub filters2: usize,
    pub d_model: usize,
}

const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub conv1_k: ParamId,
    pub conv1_b: ParamId,
    pub conv2_k: ParamId,
    pub conv2_b: ParamId,
    pub proj: Linear,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let [c, h, w] = cfg.obs_shape;
        if c == 0 || h == 0 || w == 0 || cfg.filters1 == 0 || cfg.filters2 == 0 || cfg.d_model == 0 {
            return Err(Error::Config(format!("invalid encoder config {cfg:?}")));
        }
        let b1 = 1.0 / ((c * KERNEL * KERNEL) as f64).sqrt();
        let b2 = 1.0 / ((cfg.filters1 * KERNEL * KERNEL) as f64).sqrt();
        Ok(EncoderParams {
            cfg,
            conv1_k: store.add_uniform(format!("{name}.conv1.k"), &[cfg.filters1, c, KERNEL, KERNEL], b1, rng),
            conv1_b: store.add_const(format!("{name}.conv1.b"), &[cfg.filters1], 0.0),
            conv2_k: store.add_uniform(
                format!("{name}.conv2.k"),
                &[cfg.filters2, cfg.filters1, KERNEL, KERNEL],
                b2,
                rng,
            ),
            conv2_b: store.add_const(format!("{name}.conv2.b"), &[cfg.filters2], 0.0),
            proj: Linear::init(store, &format!("{name}.proj"), cfg.filters2 * h * w, cfg.d_model, rng),
        })
    }
}

/// Encodes `frames [T, C, H, W]` into `[T, d_model]` with shared weights.
pub fn encode_observations(g: &mut Graph, store: &ParamStore, frames: Var, enc: &EncoderParams) -> Result<Var> {
    let shape = g.value(frames).shape().to_vec();
    let [c, h, w] = enc.cfg.obs_shape;
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::dim(format!(
            "encoder expects [T, {c}, {h}, {w}] frames, got {shape:?}"
        )));
    }
    let t = shape[0];
    let k1 = g.param(store, enc.conv1_k);
    let b1 = g.param(store, enc.conv1_b);
    let x = g.conv2d(frames, k1, Some(b1), 1, PAD)?;
    let x = g.relu(x)?;
    let k2 = g.param(store, enc.conv2_k);
    let b2 = g.param(store, enc.conv2_b);
    let x = g.conv2d(x, k2, Some(b2), 1, PAD)?;
    let x = g.relu(x)?;
    let x = g.reshape(x, &[t, enc.cfg.filters2 * h * w])?;
    enc.proj.forward(g, store, x)
}
