//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order; [`Graph::backward`] walks it in reverse. Build
//! a fresh graph per forward pass and drop it after reading gradients.

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Square boolean attention mask; `allowed(i, j)` means query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(Error::dim(format!(
                "mask of size {size} needs {} entries, got {}",
                size * size,
                allowed.len()
            )));
        }
        Ok(Mask { size, allowed })
    }

    pub fn full(size: usize) -> Self {
        Mask {
            size,
            allowed: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// How the rows of an attention input are grouped into sequences.
///
/// Inputs are `[n_seq * seq_len, d]`, sequence-major. Keys before
/// `key_start[s]` in sequence `s` are padding and never attended.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayout<'a> {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub mask: &'a Mask,
    pub key_start: &'a [usize],
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a) => vec![*a],
            Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Pick { x, .. }
            | Op::Clamp { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, k, b, .. } => {
                let mut v = vec![*x, *k];
                v.extend(b.iter().copied());
                v
            }
            Op::ConcatRows(vs) => vs.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
    backward_done: bool,
    params: Vec<Option<Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(true)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn zeroed(dst: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; n])
}

impl Graph {
    /// `checked` enables the non-finite guard on every op.
    pub fn new(checked: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            checked,
            backward_done: false,
            params: Vec::new(),
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Tracked leaf whose gradient is populated by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if i >= self.params.len() {
            self.params.resize(i + 1, None);
        }
        if let Some(v) = self.params[i] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params[i] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients for every parameter that entered this graph.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (i, var) in self.params.iter().enumerate() {
            if let Some(v) = var {
                if i < out.grads.len() {
                    out.grads[i] = self.nodes[v.0].grad.clone();
                }
            }
        }
        out
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Attention probabilities saved by an attention node,
    /// laid out `[n_seq, n_heads, seq_len, seq_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "minimum", f64::min)?;
        self.push(t, Op::Minimum(a, b))
    }

    /// Adds a bias vector to every row (broadcast over the last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.shape().last().copied().unwrap_or(1);
        if tb.numel() != cols {
            return Err(Error::dim(format!(
                "add_row: bias {:?} does not match last axis of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(x, b)| *x += b);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(a, bias))
    }

    /// `x · W + b` for `x [n, in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.unary(a, |x| c * x);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.unary(a, |x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp { x: a, lo, hi })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Softmax { x, len, inner })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.rows();
        if cols == 0 {
            return Err(Error::dim("log_softmax: empty last axis"));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(t, Op::LogSoftmax(x))
    }

    /// Normalizes the last axis to zero mean / unit variance, then `gain·x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.shape().last().copied().unwrap_or(0);
        if cols == 0 {
            return Err(Error::dim("layernorm: zero-length last dimension"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::dim(format!(
                "layernorm: gain {:?} / bias {:?} do not match last axis {cols}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.numel() / cols;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Valid cross-correlation of `input` (`[C,H,W]` or batched `[N,C,H,W]`)
    /// with `kernels [F,C,kh,kw]`, optional per-filter `bias [F]`, zero padding `pad`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tk) = (self.value(input), self.value(kernels));
        let single = tx.rank() == 3;
        if !(single || tx.rank() == 4) || tk.rank() != 4 {
            return Err(Error::dim(format!(
                "conv2d: expected [N,]C,H,W input and F,C,kh,kw kernels, got {:?} and {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be positive"));
        }
        let s = tx.shape();
        let (n, c, h, w) = if single {
            (1, s[0], s[1], s[2])
        } else {
            (s[0], s[1], s[2], s[3])
        };
        let ks = tk.shape();
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d: kernel channels {kc} vs input channels {c}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != f {
                return Err(Error::dim("conv2d: bias length must equal filter count"));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(tx.data(), &geom);
        let p = geom.out_pixels();
        let mut tmp = vec![0.0; n * p * f];
        gemm(n * p, geom.patch(), f, &cols, false, tk.data(), true, &mut tmp, false);
        let mut out = vec![0.0; n * f * p];
        let bvals = bias.map(|b| self.value(b).data().to_vec());
        for ni in 0..n {
            for pi in 0..p {
                for fi in 0..f {
                    let mut v = tmp[(ni * p + pi) * f + fi];
                    if let Some(bv) = &bvals {
                        v += bv[fi];
                    }
                    out[(ni * f + fi) * p + pi] = v;
                }
            }
        }
        let shape = if single {
            vec![f, geom.oh, geom.ow]
        } else {
            vec![n, f, geom.oh, geom.ow]
        };
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Conv2d {
                x: input,
                k: kernels,
                b: bias,
                geom,
                cols,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::dim(format!("transpose: need rank 2, got {:?}", tx.shape())));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push(t, Op::Transpose(x))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_rows: no inputs"));
        }
        let cols = self.value(xs[0]).shape().get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(Error::dim(format!(
                    "concat_rows: expected [_, {cols}], got {:?}",
                    t.shape()
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push(t, Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.shape()[1] {
            return Err(Error::dim(format!(
                "slice_cols: columns {start}..{} out of range for {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        self.push(t, Op::SliceCols { x, start })
    }

    /// Selects rows (first-axis slices) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(Error::dim("gather_rows: scalar input"));
        }
        let n = tx.shape()[0];
        let row = if n == 0 { 0 } else { tx.numel() / n };
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("gather_rows: row {i} of {n}")));
            }
            out.extend_from_slice(&tx.data()[i * row..(i + 1) * row]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Picks `x[r][c]` for each `(r, c)` of a rank-2 tensor; output is 1-D.
    pub fn pick(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::dim(format!("pick: need rank 2, got {:?}", tx.shape())));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut flat = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= r || j >= c {
                return Err(Error::Index(format!("pick: ({i}, {j}) outside {r}x{c}")));
            }
            flat.push(i * c + j);
        }
        let data = flat.iter().map(|&f| tx.data()[f]).collect();
        let t = Tensor::new(vec![pairs.len()], data)?;
        self.push(t, Op::Pick { x, flat })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.rows();
        let data: Vec<f64> = if cols == 0 {
            vec![]
        } else {
            tx.data().chunks(cols).map(|r| r.iter().sum()).collect()
        };
        let shape = tx.shape()[..tx.rank().saturating_sub(1)].to_vec();
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SumLast(x))
    }

    /// Mean squared error against a detached target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        same_shape("mse", tp, target)?;
        if tp.numel() == 0 {
            return Err(Error::dim("mse of empty tensors"));
        }
        let s = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / tp.numel() as f64;
        self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?} vs {} targets",
                tl.shape(),
                targets.len()
            )));
        }
        let a = tl.shape()[1];
        let mut probs = vec![0.0; tl.numel()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= a {
                return Err(Error::Index(format!("cross_entropy: target {t} not in [0, {a})")));
            }
            let row = &tl.data()[r * a..(r + 1) * a];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..a {
                probs[r * a + j] = (row[j] - m).exp() / z;
            }
            loss += -(row[t] - m - z.ln());
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`,
    /// each `[n_seq * seq_len, d]`. Disallowed positions get `-inf` scores; a
    /// query with no allowed key (pure padding) attends to itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        let AttentionLayout {
            n_seq,
            seq_len: t,
            n_heads,
            mask,
            key_start,
        } = *layout;
        if tq.rank() != 2 || tq.shape()[0] != n_seq * t {
            return Err(Error::dim(format!(
                "attention: input {:?} is not [{n_seq}*{t}, d]",
                tq.shape()
            )));
        }
        let d = tq.shape()[1];
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::dim(format!(
                "attention: width {d} not divisible by {n_heads} heads"
            )));
        }
        if mask.size() != t || key_start.len() != n_seq {
            return Err(Error::dim("attention: mask or key_start does not match layout"));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; n_seq * n_heads * t * t];
        let mut out = vec![0.0; n_seq * t * d];
        let mut scores = vec![0.0; t];
        for s in 0..n_seq {
            for h in 0..n_heads {
                for i in 0..t {
                    let qi = &qd[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                    let any = (0..t).any(|j| mask.allowed(i, j) && j >= key_start[s]);
                    let mut m = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let ok = if any {
                            mask.allowed(i, j) && j >= key_start[s]
                        } else {
                            j == i
                        };
                        *sc = if ok {
                            let kj = &kd[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        m = m.max(*sc);
                    }
                    let prow = &mut probs[((s * n_heads + h) * t + i) * t..((s * n_heads + h) * t + i + 1) * t];
                    let mut z = 0.0;
                    for j in 0..t {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - m).exp()
                        };
                        prow[j] = e;
                        z += e;
                    }
                    prow.iter_mut().for_each(|p| *p /= z);
                    let orow = &mut out[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p != 0.0 {
                            let vj = &vd[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                            orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                        }
                    }
                }
            }
        }
        let tout = Tensor::new(vec![n_seq * t, d], out)?;
        self.push(
            tout,
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                seq_len: t,
                n_heads,
                probs,
            },
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        let root = loss.0;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(Error::Graph(format!(
                        "cycle: node {i} ({}) depends on node {}",
                        node.op.name(),
                        inp.0
                    )));
                }
            }
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            if self.checked && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    self.nodes[i].op.name()
                )));
            }
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        self.backward_done = true;
        Ok(())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = &node.value;
        let y = val.data();
        macro_rules! acc {
            ($v:expr, $data:expr) => {
                if self.tracked($v) {
                    add_into(&mut grads[$v.0], &$data);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.tracked(*a) {
                    let da = zeroed(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, tb.data(), true, da, true);
                }
                if self.tracked(*b) {
                    let db = zeroed(&mut grads[b.0], k * n);
                    gemm(k, m, n, ta.data(), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                acc!(*a, g);
                acc!(*b, g);
            }
            Op::Sub(a, b) => {
                acc!(*a, g);
                if self.tracked(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d: Vec<f64> = g.iter().zip(tb.data()).map(|(g, b)| g * b).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.tracked(*b) {
                    let d: Vec<f64> = g.iter().zip(ta.data()).map(|(g, a)| g * a).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                if self.tracked(*a) {
                    let d: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.tracked(*b) {
                    let d: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(a, bias) => {
                acc!(*a, g);
                if self.tracked(*bias) {
                    let cols = self.value(*bias).numel();
                    let db = zeroed(&mut grads[bias.0], cols);
                    for row in g.chunks(cols.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc!(*a, d);
            }
            Op::AddScalar(a) => acc!(*a, g),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc!(*a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                acc!(*a, d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc!(*a, d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc!(*a, d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                acc!(*a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                acc!(*a, d);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if v > lo && v < hi { *g } else { 0.0 })
                    .collect();
                acc!(*x, d);
            }
            Op::Softmax { x, len, inner } => {
                let (len, inner) = (*len, *inner);
                let outer = y.len() / (len * inner).max(1);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc!(*x, d);
            }
            Op::LogSoftmax(x) => {
                let (_, cols) = val.rows();
                let mut d = vec![0.0; y.len()];
                for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..cols {
                        drow[j] = grow[j] - yrow[j].exp() * gs;
                    }
                }
                acc!(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if self.tracked(*x) {
                    let mut d = vec![0.0; y.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let n = cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] = inv_std[r] / n * (n * dxhat[c] - s1 - xr[c] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], &d);
                }
                if self.tracked(*gain) {
                    let dg = zeroed(&mut grads[gain.0], cols);
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * xr[c];
                        }
                    }
                }
                if self.tracked(*bias) {
                    let db = zeroed(&mut grads[bias.0], cols);
                    for gr in g.chunks(cols) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let (n, f, p) = (geom.n, geom.f, geom.out_pixels());
                // back to [n*p, f]
                let mut gt = vec![0.0; n * p * f];
                for ni in 0..n {
                    for fi in 0..f {
                        for pi in 0..p {
                            gt[(ni * p + pi) * f + fi] = g[(ni * f + fi) * p + pi];
                        }
                    }
                }
                if self.tracked(*k) {
                    let dk = zeroed(&mut grads[k.0], f * geom.patch());
                    gemm(f, n * p, geom.patch(), &gt, true, cols, false, dk, true);
                }
                if self.tracked(*x) {
                    let kd = self.value(*k).data();
                    let mut dcols = vec![0.0; n * p * geom.patch()];
                    gemm(n * p, f, geom.patch(), &gt, false, kd, false, &mut dcols, false);
                    let dx = zeroed(&mut grads[x.0], n * geom.c * geom.h * geom.w);
                    col2im(&dcols, geom, dx);
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        let db = zeroed(&mut grads[b.0], f);
                        for (j, v) in gt.iter().enumerate() {
                            db[j % f] += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => acc!(*x, g),
            Op::Transpose(x) => {
                let (r, c) = (val.shape()[0], val.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        d[j * r + i2] = g[i2 * c + j];
                    }
                }
                acc!(*x, d);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.value(*x).numel();
                    acc!(*x, g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.tracked(*x) {
                    let xs = self.value(*x).shape();
                    let (r, c) = (xs[0], xs[1]);
                    let len = val.shape()[1];
                    let dx = zeroed(&mut grads[x.0], r * c);
                    for i2 in 0..r {
                        for j in 0..len {
                            dx[i2 * c + start + j] += g[i2 * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.tracked(*x) {
                    let tx = self.value(*x);
                    let row = if tx.shape()[0] == 0 { 0 } else { tx.numel() / tx.shape()[0] };
                    let dx = zeroed(&mut grads[x.0], tx.numel());
                    for (o, &r) in idx.iter().enumerate() {
                        for j in 0..row {
                            dx[r * row + j] += g[o * row + j];
                        }
                    }
                }
            }
            Op::Pick { x, flat } => {
                if self.tracked(*x) {
                    let n = self.value(*x).numel();
                    let dx = zeroed(&mut grads[x.0], n);
                    for (o, &f) in flat.iter().enumerate() {
                        dx[f] += g[o];
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc!(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc!(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(x) => {
                let tx = self.value(*x);
                let (_, cols) = tx.rows();
                let mut d = vec![0.0; tx.numel()];
                for (r, chunk) in d.chunks_mut(cols.max(1)).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = g[r]);
                }
                acc!(*x, d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let d: Vec<f64> = p.iter().zip(target).map(|(p, t)| g[0] * 2.0 * (p - t) / n).collect();
                acc!(*pred, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let a = self.value(*logits).shape()[1];
                let b = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| g[0] * p / b).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * a + t] -= g[0] / b;
                }
                acc!(*logits, d);
            }
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                seq_len,
                n_heads,
                probs,
            } => {
                let (t, h_n) = (*seq_len, *n_heads);
                let d = self.value(*q).shape()[1];
                let dh = d / h_n;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; t];
                for s in 0..*n_seq {
                    for h in 0..h_n {
                        for i2 in 0..t {
                            let prow = &probs[((s * h_n + h) * t + i2) * t..((s * h_n + h) * t + i2 + 1) * t];
                            let go = &g[(s * t + i2) * d + h * dh..(s * t + i2) * d + (h + 1) * dh];
                            let mut dot = 0.0;
                            for j in 0..t {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = (s * t + j) * d + h * dh;
                                dp[j] = go.iter().zip(&vd[vj..vj + dh]).map(|(a, b)| a * b).sum();
                                dot += prow[j] * dp[j];
                                for e in 0..dh {
                                    dv[vj + e] += prow[j] * go[e];
                                }
                            }
                            let qi = (s * t + i2) * d + h * dh;
                            for j in 0..t {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let kj = (s * t + j) * d + h * dh;
                                for e in 0..dh {
                                    dq[qi + e] += ds * kd[kj + e];
                                    dk[kj + e] += ds * qd[qi + e];
                                }
                            }
                        }
                    }
                }
                acc!(*q, dq);
                acc!(*k, dk);
                acc!(*v, dv);
            }
        }
    }
}
