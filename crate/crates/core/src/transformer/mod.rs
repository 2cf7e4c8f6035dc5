//! Transformer pieces shared by the Q-network and the Decision Transformer:
//! sinusoidal positions, causal masks, multi-head self-attention, GRU-style
//! residual gating, pre-norm blocks and the convolutional frame encoder.

mod block;
mod encoder;

pub use block::{
    gru_gate, multi_head_attention, transformer_block, AttentionParams, BlockParams, GateParams,
    TransformerStack,
};
pub use encoder::{encode_observations, EncoderConfig, EncoderParams};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{AttentionLayout, Graph, Mask, ParamId, ParamStore, Tensor, Var};
use std::fmt;
use std::str::FromStr;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    ResidualAdd,
    GruGate,
}

impl FromStr for Gating {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" | "residual-add" => Ok(Gating::ResidualAdd),
            "gru" | "gru-gate" => Ok(Gating::GruGate),
            other => Err(Error::Config(format!(
                "unknown gating '{other}' (expected residual or gru)"
            ))),
        }
    }
}

impl fmt::Display for Gating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gating::ResidualAdd => "residual",
            Gating::GruGate => "gru",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub gating: Gating,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            n_heads: 8,
            n_layers: 5,
            d_ff: 256,
            context_len: 50,
            gating: Gating::GruGate,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "context_len, n_layers and d_ff must be at least 1".into(),
            ));
        }
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be even for sinusoidal positions",
                self.d_model
            )));
        }
        Ok(())
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if len == 0 || d < 2 || d % 2 != 0 {
        return Err(Error::dim(format!(
            "positional encoding needs len >= 1 and even width >= 2, got {len}x{d}"
        )));
    }
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Lower-triangular mask: query `i` may attend to key `j` iff `j <= i`.
pub fn causal_mask(len: usize) -> Mask {
    let allowed = (0..len * len).map(|k| k % len <= k / len).collect();
    Mask::new(len, allowed).expect("square")
}

/// Row grouping for a batch of left-padded sequences.
#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub mask: Mask,
    /// First real (non-padding) position of each sequence.
    pub key_start: Vec<usize>,
}

impl SeqLayout {
    pub fn causal(n_seq: usize, seq_len: usize, key_start: Vec<usize>) -> Self {
        assert_eq!(key_start.len(), n_seq);
        SeqLayout {
            n_seq,
            seq_len,
            mask: causal_mask(seq_len),
            key_start,
        }
    }

    pub fn single(seq_len: usize) -> Self {
        Self::causal(1, seq_len, vec![0])
    }

    pub fn attention(&self, n_heads: usize) -> AttentionLayout<'_> {
        AttentionLayout {
            n_seq: self.n_seq,
            seq_len: self.seq_len,
            n_heads,
            mask: &self.mask,
            key_start: &self.key_start,
        }
    }

    /// Positional table for the batch: each sequence counts positions from
    /// its first real slot (padding rows get position 0).
    pub fn positions(&self, d: usize) -> Result<Tensor> {
        let pe = positional_encoding(self.seq_len, d)?;
        let mut data = Vec::with_capacity(self.n_seq * self.seq_len * d);
        for &start in &self.key_start {
            for t in 0..self.seq_len {
                let pos = t.saturating_sub(start);
                data.extend_from_slice(&pe.data()[pos * d..(pos + 1) * d]);
            }
        }
        Tensor::new(vec![self.n_seq * self.seq_len, d], data)
    }
}

/// Affine layer `x · W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng),
            b: store.add_const(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Gain/bias pair for layer normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add_const(format!("{name}.gain"), &[d], 1.0),
            bias: store.add_const(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias, LAYERNORM_EPS)
    }
}

#[cfg(test)]
mod tests;
