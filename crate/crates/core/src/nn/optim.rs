use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

/// Plain SGD with a step learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl SgdConfig {
    /// Batch 20, lr 0.005 decayed ×0.1 every 12 epochs, 50 epochs.
    pub fn full() -> Self {
        Self {
            lr0: 0.005,
            decay_factor: 0.1,
            decay_every: 12,
            batch_size: 20,
            epochs: 50,
        }
    }

    /// Same schedule shortened to 15 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 15,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::config("sgd.lr0", format!("{} must be > 0", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("sgd.decay_factor", format!("{} is outside (0, 1]", self.decay_factor)));
        }
        if self.decay_every < 1 {
            return Err(Error::config("sgd.decay_every", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("sgd.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `lr0 · decay_factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &SgdConfig) -> f64 {
    let steps = (epoch / cfg.decay_every.max(1)) as i32;
    cfg.lr0 * cfg.decay_factor.powi(steps)
}

/// `param -= lr * grad` for every parameter. No momentum, no weight decay.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    let g = grads.buffers();
    let mut params = net.param_buffers_mut();
    if g.len() != params.len() || params.iter().zip(&g).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Dimension("gradient buffers do not match network parameters".into()));
    }
    for (p, g) in params.iter_mut().zip(g) {
        p.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
    }
    Ok(())
}
