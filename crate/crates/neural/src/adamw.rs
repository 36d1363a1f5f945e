//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<S> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient, so decay still applies to them.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>) {
        assert_eq!(self.m.len(), params.len(), "optimizer state does not match parameters");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = S::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let one = S::one();
        let lr = S::from_f64_lossy(c.lr);
        let eps = S::from_f64_lossy(c.eps);
        let shrink = S::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(S::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * shrink - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![v]).unwrap());
        p
    }

    fn grads_of(params: &ParamStore<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(params);
        grads.accumulate(params.id("x").unwrap(), Tensor::new(&[1], vec![g]).unwrap());
        grads
    }

    #[test]
    fn zero_grads_and_zero_decay_leave_params() {
        let mut p = scalar_store(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        let g = grads_of(&p, 0.0);
        for _ in 0..5 {
            st.step(&mut p, &g);
        }
        let id = p.id("x").unwrap();
        assert_eq!(p.get(id).data()[0], 1.5);
    }

    #[test]
    fn decay_with_zero_grads_is_multiplicative_shrink() {
        let mut p = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        let zero = Gradients::zeros_like(&p);
        st.step(&mut p, &zero);
        assert_eq!(p.get(p.id("x").unwrap()).data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1
        // x <- x (1 - lr wd) - lr / (1 + eps)
        let mut p = scalar_store(0.5);
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        let g = grads_of(&p, 1.0);
        st.step(&mut p, &g);
        let expected = 0.5 * (1.0 - 3e-4 * 0.01) - 3e-4 * 1.0 / (1.0 + 1e-8);
        let got = p.get(p.id("x").unwrap()).data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn moments_are_not_decayed() {
        let mut p = scalar_store(3.0);
        let cfg = AdamWConfig {
            weight_decay: 0.3,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        let g = grads_of(&p, 2.0);
        st.step(&mut p, &g);
        assert!((st.m[0].data()[0] - 0.2).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn reduces_quadratic_through_graph() {
        // loss = mean((w x - y)^2) for a single weight
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 1], vec![0.0f64]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        for _ in 0..400 {
            let grads = {
                let mut g = Graph::new(&p);
                let x = g.input(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
                let w = g.param_by_name("w").unwrap();
                let y = g.linear(x, w, None).unwrap();
                let l = g.mse(y, Tensor::new(&[2, 1], vec![3.0, 6.0]).unwrap()).unwrap();
                g.backward(l).unwrap()
            };
            st.step(&mut p, &grads);
        }
        assert!((p.get(p.id("w").unwrap()).data()[0] - 3.0).abs() < 1e-2);
    }
}
