use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Adam with bias correction folded into the step size:
///
/// `lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`, `w -= lr_t * m / (sqrt(v) + eps)`.
///
/// Moments are kept in `f64`, one buffer per parameter index.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter from its `grad`.
    ///
    /// A missing gradient counts as zero. If any trainable gradient holds a
    /// NaN or infinity, nothing is updated and the offending parameter is reported.
    pub fn step<T: Scalar>(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient of {} has shape {:?}, value has {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        group: p.group.to_string(),
                    });
                }
            }
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let lr_t = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let grad = p.grad.as_ref().map(|g| g.data());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[j].as_f64());
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let delta = lr_t * m[j] / (v[j].sqrt() + epsilon);
                if delta != 0.0 {
                    *w = T::of(w.as_f64() - delta);
                }
            }
        }
        Ok(())
    }
}

/// Continuous exponential decay `lr0 * rate^(step / decay_steps)`.
pub fn lr_at_step(lr0: f64, decay_rate: f64, decay_steps: u64, step: u64) -> f64 {
    assert!(decay_steps > 0, "decay_steps must be positive");
    lr0 * decay_rate.powf(step as f64 / decay_steps as f64)
}
