//! Central finite-difference gradient checking used across unit tests.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares analytic gradients of a scalar function of `inputs` with central
/// differences; returns the worst relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new(false);
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], num));
        }
    }
    worst
}

/// Same check against every scalar of a parameter store.
pub fn check_params<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(false);
    let out = f(&mut g, store).unwrap();
    g.backward(out).unwrap();
    let grads = g.param_grads(store);
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let mut p = store.clone();
            p.get_mut(id).data_mut()[j] += FD_STEP;
            let mut m = store.clone();
            m.get_mut(id).data_mut()[j] -= FD_STEP;
            let fp = {
                let mut g = Graph::new(false);
                let o = f(&mut g, &p).unwrap();
                g.value(o).item()
            };
            let fm = {
                let mut g = Graph::new(false);
                let o = f(&mut g, &m).unwrap();
                g.value(o).item()
            };
            let num = (fp - fm) / (2.0 * FD_STEP);
            let ana = grads.get(id).map_or(0.0, |t| t.data()[j]);
            worst = worst.max(rel_err(ana, num));
        }
    }
    worst
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
