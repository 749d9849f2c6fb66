//! Learning-rate schedule and the Adam optimizer.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use squeeze_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total <= warmup {
        peak
    } else {
        peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam without weight decay. Moments are keyed by parameter
/// name, so several stores can share one optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: IndexMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per optimization step before
    /// any `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Replaces every tensor in `params` with its Adam update at rate `lr`.
    /// Tensors that received no gradient are treated as having a zero one.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Contract("Adam::update called before begin_step".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let p = params.get(&name)?;
            let n = p.numel();
            let grad = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::Contract(format!("parameter `{name}` changed size under the optimizer")));
            }
            let mut data = p.to_vec();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.shape().to_vec();
            params.replace(&name, Tensor::parameter(data, &shape)?)?;
        }
        Ok(())
    }
}
