use super::{Gating, LayerNormParams, Linear, SeqLayout, TransformerConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            q: Linear::init(store, &format!("{name}.q"), d, d, rng),
            k: Linear::init(store, &format!("{name}.k"), d, d, rng),
            v: Linear::init(store, &format!("{name}.v"), d, d, rng),
            out: Linear::init(store, &format!("{name}.out"), d, d, rng),
        }
    }
}

/// Weights of one GRU-style gate (row-vector convention, `x · W`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub wr: ParamId,
    pub ur: ParamId,
    pub wz: ParamId,
    pub uz: ParamId,
    pub wg: ParamId,
    pub ug: ParamId,
    /// Subtracted inside the update gate; positive values keep the gate near closed.
    pub bg: ParamId,
}

pub const GATE_BIAS_INIT: f64 = 2.0;

impl GateParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = |suffix: &str| store.add_uniform(format!("{name}.{suffix}"), &[d, d], bound, rng);
        let (wr, ur, wz, uz, wg, ug) = (w("wr"), w("ur"), w("wz"), w("uz"), w("wg"), w("ug"));
        GateParams {
            wr,
            ur,
            wz,
            uz,
            wg,
            ug,
            bg: store.add_const(format!("{name}.bg"), &[d], GATE_BIAS_INIT),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub gate1: Option<GateParams>,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub gate2: Option<GateParams>,
}

impl BlockParams {
    pub fn init(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let gated = cfg.gating == Gating::GruGate;
        BlockParams {
            ln1: LayerNormParams::init(store, &format!("{name}.ln1"), d),
            attn: AttentionParams::init(store, &format!("{name}.attn"), d, rng),
            gate1: gated.then(|| GateParams::init(store, &format!("{name}.gate1"), d, rng)),
            ln2: LayerNormParams::init(store, &format!("{name}.ln2"), d),
            ff1: Linear::init(store, &format!("{name}.ff1"), d, cfg.d_ff, rng),
            ff2: Linear::init(store, &format!("{name}.ff2"), cfg.d_ff, d, rng),
            gate2: gated.then(|| GateParams::init(store, &format!("{name}.gate2"), d, rng)),
        }
    }
}

/// Projects `x [N, d]` to queries/keys/values, attends per head, concatenates
/// the heads and applies the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    params: &AttentionParams,
    n_heads: usize,
    layout: &SeqLayout,
) -> Result<Var> {
    let d = g.value(x).shape().get(1).copied().unwrap_or(0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::dim(format!(
            "multi-head attention: d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let q = params.q.forward(g, store, x)?;
    let k = params.k.forward(g, store, x)?;
    let v = params.v.forward(g, store, x)?;
    let a = g.attention(q, k, v, &layout.attention(n_heads))?;
    params.out.forward(g, store, a)
}

/// `r = σ(y·Wr + x·Ur)`, `z = σ(y·Wz + x·Uz − bg)`, `h = tanh(y·Wg + (r⊙x)·Ug)`,
/// output `(1−z)⊙x + z⊙h`.
pub fn gru_gate(g: &mut Graph, store: &ParamStore, x: Var, y: Var, p: &GateParams) -> Result<Var> {
    if g.value(x).shape() != g.value(y).shape() {
        return Err(Error::dim(format!(
            "gru gate: residual {:?} vs sublayer {:?}",
            g.value(x).shape(),
            g.value(y).shape()
        )));
    }
    let lin = |g: &mut Graph, a: Var, w: ParamId| {
        let w = g.param(store, w);
        g.matmul(a, w)
    };
    let yr = lin(g, y, p.wr)?;
    let xr = lin(g, x, p.ur)?;
    let r_pre = g.add(yr, xr)?;
    let r = g.sigmoid(r_pre)?;

    let yz = lin(g, y, p.wz)?;
    let xz = lin(g, x, p.uz)?;
    let z_sum = g.add(yz, xz)?;
    let bg = g.param(store, p.bg);
    let neg_bg = g.scale(bg, -1.0)?;
    let z_pre = g.add_row(z_sum, neg_bg)?;
    let z = g.sigmoid(z_pre)?;

    let yg = lin(g, y, p.wg)?;
    let rx = g.mul(r, x)?;
    let rxg = lin(g, rx, p.ug)?;
    let h_pre = g.add(yg, rxg)?;
    let h = g.tanh(h_pre)?;

    let diff = g.sub(h, x)?;
    let step = g.mul(z, diff)?;
    g.add(x, step)
}

fn merge(g: &mut Graph, store: &ParamStore, x: Var, y: Var, gate: Option<&GateParams>) -> Result<Var> {
    match gate {
        Some(p) => gru_gate(g, store, x, y, p),
        None => g.add(x, y),
    }
}

/// Pre-norm block: LN → attention → gate/residual → LN → FF(GELU) → gate/residual.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    params: &BlockParams,
    cfg: &TransformerConfig,
    layout: &SeqLayout,
) -> Result<Var> {
    let h = params.ln1.forward(g, store, x)?;
    let a = multi_head_attention(g, store, h, &params.attn, cfg.n_heads, layout)?;
    let x = merge(g, store, x, a, params.gate1.as_ref())?;
    let h = params.ln2.forward(g, store, x)?;
    let f = params.ff1.forward(g, store, h)?;
    let f = g.gelu(f)?;
    let f = params.ff2.forward(g, store, f)?;
    merge(g, store, x, f, params.gate2.as_ref())
}

/// `n_layers` blocks followed by a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub cfg: TransformerConfig,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
}

impl TransformerStack {
    pub fn init(store: &mut ParamStore, name: &str, cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockParams::init(store, &format!("{name}.block{i}"), &cfg, rng))
            .collect();
        Ok(TransformerStack {
            cfg,
            blocks,
            ln_f: LayerNormParams::init(store, &format!("{name}.ln_f"), cfg.d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SeqLayout) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = transformer_block(g, store, h, b, &self.cfg, layout)?;
        }
        self.ln_f.forward(g, store, h)
    }
}
