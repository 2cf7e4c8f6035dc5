use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamId, ParamStore, Var};

/// Packed gate weights, columns ordered `[i | f | o | g]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    /// Uniform init with bound 1/sqrt(hidden); forget-gate bias starts at +1.
    pub fn init(store: &mut ParamStore, name: &str, input_size: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if input_size == 0 || hidden == 0 {
            return Err(Error::Config("lstm sizes must be positive".into()));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.add_uniform(format!("{name}.w_x"), &[input_size, 4 * hidden], bound, rng);
        let w_h = store.add_uniform(format!("{name}.w_h"), &[hidden, 4 * hidden], bound, rng);
        let b = store.add_const(format!("{name}.b"), &[4 * hidden], 0.0);
        store.get_mut(b).data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(LstmParams { input_size, hidden, w_x, w_h, b })
    }
}

/// One step for a batch: `x [N, in]`, `h, c [N, hidden]` -> `(h', c')`.
pub fn lstm_cell(g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let n = p.hidden;
    let (wx, wh, b) = (g.param(store, p.w_x), g.param(store, p.w_h), g.param(store, p.b));
    let zx = g.linear(x, wx, b)?;
    let zh = g.matmul(h, wh)?;
    let z = g.add(zx, zh)?;
    let i = g.slice_cols(z, 0, n)?;
    let i = g.sigmoid(i)?;
    let f = g.slice_cols(z, n, n)?;
    let f = g.sigmoid(f)?;
    let o = g.slice_cols(z, 2 * n, n)?;
    let o = g.sigmoid(o)?;
    let cand = g.slice_cols(z, 3 * n, n)?;
    let cand = g.tanh(cand)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c2 = g.add(keep, write)?;
    let tc = g.tanh(c2)?;
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}
