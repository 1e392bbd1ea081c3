use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warmup from 0 to `peak`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(peak >= 0.0 && peak.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {peak}")));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup ({warmup_steps} steps) longer than training ({total_steps} steps)"
            )));
        }
        Ok(Self {
            peak,
            min_lr: 0.0,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + (self.peak - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// vectors (biases, norm gains, tokens of width 1) are exempt.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update from the gradients stored on `store`'s tensors.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((param, m), v) in store.tensors_mut().zip(&mut self.first).zip(&mut self.second) {
            if !param.requires_grad {
                continue;
            }
            let Some(grad) = param.grad.take() else { continue };
            let decay = if param.shape().len() >= 2 && param.shape().iter().filter(|&&d| d > 1).count() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            }
            if lr == 0.0 {
                continue;
            }
            let data = param.data_mut();
            for i in 0..data.len() {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * data[i]);
            }
        }
    }
}
