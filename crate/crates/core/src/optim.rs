//! Adam with bias correction and global gradient-norm clipping.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        Adam {
            config,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `lrs[i]` is the learning rate for `params[i]`.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lrs: &[f64]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), params.len());
        assert_eq!(lrs.len(), params.len());
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g.to_f64_lossy();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = lrs[i] * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - update);
            }
        }
    }
}

pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
