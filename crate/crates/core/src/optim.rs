//! AdamW with decoupled weight decay and global-norm clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    /// Linear learning-rate ramp over the first steps of this optimizer.
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0, warmup_steps: 0 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning-rate scale at the current step, in `(0, 1]`.
    pub fn warmup_factor(&self) -> f64 {
        match self.cfg.warmup_steps {
            0 => 1.0,
            w => (self.step as f64 / w as f64).min(1.0),
        }
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
        grads
            .params()
            .iter()
            .filter(|(id, _)| store.get(*id).trainable)
            .flat_map(|(_, g)| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// Frozen parameters are never written. Returns the pre-clip norm.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        self.step += 1;
        let norm = Self::grad_norm(store, grads);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.lr * self.warmup_factor();
        for (id, g) in grads.params() {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let decay = if p.tensor.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i].to_f64_lossy() * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let w = data[i].to_f64_lossy();
                data[i] = T::from_f64_lossy(w - lr * (update + decay * w));
            }
        }
        norm
    }
}

/// Snapshot of parameter values used to verify freeze contracts.
pub fn snapshot<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
    store
        .iter()
        .filter(|p| crate::params::has_prefix(&p.name, prefix))
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn minimizes_quadratic_and_respects_freeze() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap(), true).unwrap();
        let b = store.add("b", Tensor::from_f64(&[1], &[5.0]).unwrap(), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, clip_norm: 0.0, ..Default::default() });
        for _ in 0..400 {
            let grads = {
                let mut g = Graph::new(&store);
                let (pa, pb) = (g.param(a), g.param(b));
                let sa = g.mul(pa, pa).unwrap();
                let l = g.sum(sa).unwrap();
                let lb = g.sum(pb).unwrap();
                let l = g.add(l, lb).unwrap();
                g.backward(l).unwrap()
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(a).tensor.data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(b).tensor.data(), &[5.0]);
    }
}
