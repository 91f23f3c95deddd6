use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros: Vec<_> = store.iter().map(|p| Tensor::zeros(p.tensor.dims())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// Non-finite gradients abort the update before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &mut [Tensor<S>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!("adam: {} gradients for {} parameters", grads.len(), store.len())));
        }
        for (g, p) in grads.iter().zip(store.iter()) {
            if g.dims() != p.tensor.dims() {
                return Err(Error::Config(format!(
                    "adam: gradient for {:?} has dims {:?}, parameter has {:?}",
                    p.name,
                    g.dims(),
                    p.tensor.dims()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter {:?} at optimizer step {}",
                    p.name,
                    self.step + 1
                )));
            }
        }
        if let Some(max) = self.config.clip_norm {
            clip_grad_norm(grads, max);
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (nb1, nb2) = (S::from_f64_lossy(1.0 - c.beta1), S::from_f64_lossy(1.0 - c.beta2));
        let step_size = S::from_f64_lossy(c.lr / bc1);
        let inv_sqrt_bc2 = S::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = S::from_f64_lossy(c.eps);

        for (i, p) in store.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + nb1 * g[j];
                v[j] = b2 * v[j] + nb2 * g[j] * g[j];
                *w = *w - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = S::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
    norm
}

/// Elementwise `max(0, w)`.
pub fn project_nonnegative<S: Scalar>(weight: &Tensor<S>) -> Tensor<S> {
    weight.map(|v| v.max(S::zero()))
}

/// Projects every constrained parameter of the store onto the nonnegative orthant.
pub fn project_constrained<S: Scalar>(store: &mut ParamStore<S>) {
    for p in store.iter_mut().filter(|p| p.constrained) {
        for v in p.tensor.data_mut() {
            *v = v.max(S::zero());
        }
    }
}
