use alloc::vec::Vec;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam. Moments are kept in `f64` regardless of the parameter type.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients held by `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.is_empty() && self.step == 0 {
            for id in store.ids() {
                let n = store.get(id).len();
                self.m.push(alloc::vec![0.0; n]);
                self.v.push(alloc::vec![0.0; n]);
            }
        }
        if self.m.len() != store.len() {
            return Err(Error::invalid(alloc::format!(
                "optimizer tracks {} tensors but the model has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (i, (values, grads)) in store.values_and_grads().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != values.len() {
                return Err(Error::invalid(alloc::format!(
                    "optimizer state for tensor {i} has {} entries, parameter has {}",
                    m.len(),
                    values.len()
                )));
            }
            for j in 0..values.len() {
                let g = grads[j].to_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                let upd = lr * mh / (libm::sqrt(vh) + eps);
                values[j] = T::from_f64(values[j].to_f64() - upd);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, grads) in store.values_and_grads() {
        for g in grads.iter() {
            sq += g.to_f64() * g.to_f64();
        }
    }
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let f = T::from_f64(max_norm / norm);
        for (_, grads) in store.values_and_grads() {
            grads.iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}

/// `base * min(step / warmup, sqrt(warmup / step))`, with steps counted from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseSqrtSchedule {
    pub base: f64,
    pub warmup: u64,
}

impl Default for InverseSqrtSchedule {
    fn default() -> Self {
        InverseSqrtSchedule { base: 7e-4, warmup: 400 }
    }
}

impl InverseSqrtSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.base * f64::min(s / w, libm::sqrt(w / s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn one_param(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(value));
        store.grads_mut(id)[0] = grad;
        store
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = one_param(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        adam.step(&mut store, 1e-3).unwrap();
        let theta = store.get(crate::autodiff::ParamId(0)).item();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((theta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta - (-0.000999999995)).abs() < 1e-11);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = one_param(0.25, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut store, 1e-2).unwrap();
        }
        assert_eq!(store.get(crate::autodiff::ParamId(0)).item(), 0.25);
    }

    #[test]
    fn shape_drift_is_an_error() {
        let mut store = one_param(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, 1e-3).unwrap();
        store.add("extra", Tensor::scalar(1.0));
        assert!(adam.step(&mut store, 1e-3).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let id = store.add("w", Tensor::new(alloc::vec![3], alloc::vec![0.5, -1.0, 2.0]).unwrap());
            let mut adam = Adam::new(AdamConfig::default());
            for _ in 0..5 {
                store.zero_grads();
                let mut g = Graph::new();
                let w = g.param(&store, id);
                let sq = g.mul(w, w).unwrap();
                let loss = g.sum(sq).unwrap();
                g.backward(loss).unwrap();
                store.accumulate_grads(&g);
                adam.step(&mut store, 0.1).unwrap();
            }
            store.get(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(alloc::vec![2], alloc::vec![0.0, 0.0]).unwrap());
        store.grads_mut(id).copy_from_slice(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let g = store.grad(id);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = InverseSqrtSchedule { base: 1e-3, warmup: 100 };
        assert!((s.lr(100) - 1e-3).abs() < 1e-15);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
        assert!((s.lr(400) - 5e-4).abs() < 1e-15);
    }
}
