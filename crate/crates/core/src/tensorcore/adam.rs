use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// One update. Parameters without a gradient are left untouched but the
    /// step counter still advances once.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, checked: bool) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moment buffers",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if checked && !grads.is_finite() {
            return Err(Error::NonFinite("adam gradient".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let w = store.get_mut(id);
            if g.numel() != w.numel() || self.m[i].len() != w.numel() {
                return Err(Error::dim(format!(
                    "adam: gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{Graph, Tensor};

    fn single(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![w]));
        s
    }

    fn grads_of(store: &ParamStore, g: f64) -> Gradients {
        let mut gr = Gradients::zeros_like(store);
        gr.grads[0] = Some(Tensor::from_vec(vec![g]));
        gr
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut s = single(0.7);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let gr = grads_of(&s, 0.0);
        adam.step(&mut s, &gr, true).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data()[0], 0.7);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_magnitude() {
        let mut s = single(0.0);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&s, cfg);
        let gr = grads_of(&s, 1.0);
        adam.step(&mut s, &gr, true).unwrap();
        let dw = s.get(s.find("w").unwrap()).data()[0];
        // -lr * 1 / (1 + eps)
        assert!((dw - (-9.99999990e-4)).abs() < 1e-12, "{dw}");
    }

    #[test]
    fn repeated_identical_gradient_gives_equal_steps() {
        let mut s = single(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let gr = grads_of(&s, 0.3);
        adam.step(&mut s, &gr, true).unwrap();
        let w1 = s.get(s.find("w").unwrap()).data()[0];
        let gr = grads_of(&s, 0.3);
        adam.step(&mut s, &gr, true).unwrap();
        let w2 = s.get(s.find("w").unwrap()).data()[0];
        let (d1, d2) = (w1.abs(), (w2 - w1).abs());
        assert!((d1 - d2).abs() / d1 < 0.01);
    }

    #[test]
    fn rejects_non_finite_gradients_in_checked_mode() {
        let mut s = single(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let gr = grads_of(&s, f64::NAN);
        let err = adam.step(&mut s, &gr, true).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = single(3.0);
        let id = s.find("w").unwrap();
        let mut adam = AdamState::new(
            &s,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..500 {
            let mut g = Graph::new(true);
            let w = g.param(&s, id);
            let sq = g.mul(w, w).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            let grads = g.param_grads(&s);
            adam.step(&mut s, &grads, true).unwrap();
        }
        assert!(s.get(id).data()[0].abs() < 1e-2);
    }
}
