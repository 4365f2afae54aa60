use serde::{Deserialize, Serialize};

use crate::numerics::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Dense Adam moments shaped like a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One descent step with bias-corrected moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(&grads.data)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Gradient ascent: `p ← p + lr·g`.
pub fn sgd_ascent(store: &mut ParamStore, grads: &Grads, lr: f64) {
    for (p, g) in store.tensors_mut().iter_mut().zip(&grads.data) {
        for (x, gi) in p.data_mut().iter_mut().zip(g) {
            *x += lr * gi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_adam_step_moves_by_lr_against_the_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = Grads {
            data: vec![vec![3.0, -0.01, 0.0]],
        };
        adam.update(&mut store, &grads, 0.1);
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![5.0]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let x = store.tensors()[0].data()[0];
            adam.update(&mut store, &Grads { data: vec![vec![2.0 * (x - 1.0)]] }, 0.05);
        }
        assert!((store.tensors()[0].data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ascent_adds_the_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![1.0]));
        sgd_ascent(&mut store, &Grads { data: vec![vec![2.0]] }, 0.1);
        assert!((store.tensors()[0].data()[0] - 1.2).abs() < 1e-15);
    }
}
