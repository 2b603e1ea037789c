use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;
use crate::{Error, Result};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// `w -= lr · wd · w` alongside the Adam step, outside the moments.
    #[default]
    Decoupled,
    /// `wd · w` added to the gradient before the moment updates.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            decay: WeightDecay::Decoupled,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// for every trainable parameter; frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, (_, name, p)) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let n = p.value.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n || p.grad.len() != n {
                return Err(Error::Contract(format!(
                    "optimizer state for {name} holds {} values, parameter has {n}",
                    m.len()
                )));
            }
            let w = p.value.data_mut();
            for k in 0..n {
                let mut g = p.grad[k];
                if decay == WeightDecay::Coupled {
                    g += weight_decay * w[k];
                }
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if decay == WeightDecay::Decoupled {
                    w[k] -= lr * weight_decay * w[k];
                }
                w[k] -= lr * update;
            }
        }
        Ok(())
    }
}

/// Step schedule `base · factor^floor(epoch / period)`.
pub fn lr_at(epoch: usize, base: f64, factor: f64, period: usize) -> f64 {
    base * factor.powi((epoch / period.max(1)) as i32)
}
