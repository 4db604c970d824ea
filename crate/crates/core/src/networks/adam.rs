use serde::{Deserialize, Serialize};

use crate::checkpoint::OptimizerSnapshot;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 10.0,
            warmup_steps: 1000,
        }
    }
}

impl AdamConfig {
    /// Learning rate used by update number `step` (counted from 1).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam with linear warmup, global-norm clipping and decoupled weight
/// decay.
///
/// `decay` marks which parameters receive weight decay; scale parameters
/// (covariance factors, spline slopes) are left out so decay does not pull
/// covariances toward an arbitrary size.
///
/// Parameters may be split into consecutive groups with their own
/// hyperparameters and clipping, which behaves like one optimizer per
/// group stepping in lockstep.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    groups: Vec<(usize, AdamConfig)>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
}

impl OptimizerState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self::grouped(vec![(n, config)])
    }

    /// One group per `(length, config)`, in parameter order.
    pub fn grouped(groups: Vec<(usize, AdamConfig)>) -> Self {
        let n = groups.iter().map(|g| g.0).sum();
        Self {
            groups,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay: vec![true; n],
        }
    }

    pub fn configs(&self) -> impl Iterator<Item = &AdamConfig> {
        self.groups.iter().map(|g| &g.1)
    }

    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.m.len(), "decay mask length");
        self.decay = mask;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        let iteration = self.step as usize + 1;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration,
                reason: format!("non-finite gradient at coordinate {i}"),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let mut start = 0;
        for (len, c) in &self.groups {
            let range = start..start + len;
            start += len;
            let clip = clip_factor(&grads[range.clone()], c.clip_norm);
            let lr = c.lr_at(self.step);
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            for i in range {
                let g = grads[i] * clip;
                self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                if self.decay[i] {
                    params[i] *= 1.0 - lr * c.weight_decay;
                }
                let mh = self.m[i] / bc1;
                let vh = self.v[i] / bc2;
                params[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            first: self.m.clone(),
            second: self.v.clone(),
        }
    }

    pub fn restore(&mut self, snap: &OptimizerSnapshot) -> Result<()> {
        if snap.first.len() != self.m.len() || snap.second.len() != self.v.len() {
            return Err(Error::arg("optimizer snapshot has the wrong size"));
        }
        self.step = snap.step;
        self.m.clone_from(&snap.first);
        self.v.clone_from(&snap.second);
        Ok(())
    }
}

/// Rescale factor global-norm clipping would apply to `grads`.
pub fn clip_factor(grads: &[f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
