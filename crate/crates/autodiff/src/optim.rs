use ndarray::ArrayD;

use crate::error::{AdError, Result};
use crate::graph::Tensor;

/// AdamW with decoupled weight decay and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: Option<f64>,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    /// Factor applied to the gradients by clipping (1 when not clipped).
    pub clip_scale: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip: None, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = Some(clip);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Refuses (leaving everything untouched) if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<StepInfo> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(AdError::ShapeMismatch("parameter and gradient shapes differ".into()));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(AdError::NonFinite("gradient; optimizer step refused".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        let grad_norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip_scale = match self.clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if self.weight_decay != 0.0 {
                *p *= 1.0 - self.lr * self.weight_decay;
            }
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip_scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
        Ok(StepInfo { grad_norm, clip_scale })
    }
}
