//! Adaptive-moment gradient descent with bias correction.

use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Per-parameter first/second moment buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step_count: u64,
    moments: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every named parameter. Each parameter must carry a
    /// gradient; gradients are zeroed after the update.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = self.cfg.beta1 as f64;
        let b2 = self.cfg.beta2 as f64;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for (name, p) in params {
            let grad = p
                .grad()
                .ok_or_else(|| TensorError::MissingGrad { name: name.clone() })?
                .to_vec();
            let n = grad.len();
            let slot = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            debug_assert_eq!(slot.m.len(), n, "moment buffer shape drift for {name}");
            let data = p.data_mut();
            for j in 0..n {
                let g = grad[j] as f64;
                let m = b1 * slot.m[j] as f64 + (1.0 - b1) * g;
                let v = b2 * slot.v[j] as f64 + (1.0 - b2) * g * g;
                slot.m[j] = m as f32;
                slot.v[j] = v as f32;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                data[j] -= (self.cfg.learning_rate as f64 * m_hat
                    / (v_hat.sqrt() + self.cfg.epsilon as f64)) as f32;
                if !data[j].is_finite() {
                    return Err(TensorError::NonFinite { op: "adam_step" });
                }
            }
            p.zero_grad();
        }
        Ok(())
    }

    pub fn moments(&self) -> &HashMap<String, Moments> {
        &self.moments
    }

    /// Restore serialized state (used when resuming from a checkpoint).
    pub fn restore(&mut self, step_count: u64, moments: HashMap<String, Moments>) {
        self.step_count = step_count;
        self.moments = moments;
    }
}
