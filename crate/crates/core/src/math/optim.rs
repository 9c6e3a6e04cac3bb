use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_every: 60,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay_factor must be in (0,1], got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and step learning-rate decay.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    config: OptimConfig,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Learning rate in effect at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.config.decay_every == 0 {
            0
        } else {
            epoch / self.config.decay_every
        };
        self.config.lr * self.config.decay_factor.powi(steps as i32)
    }

    /// `v ← μv − lr(epoch)·g; p ← p + v`. Parameters are untouched on error.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], epoch: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dims("optimizer tensors", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dims("optimizer tensor shape", p.len(), g.len()));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {i} entry {j} is {} at epoch {epoch}",
                    g[j]
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        } else if self.velocity.len() != grads.len()
            || self.velocity.iter().zip(grads).any(|(v, g)| v.len() != g.len())
        {
            return Err(Error::InvalidArgument(
                "optimizer reused with a differently shaped parameter set".into(),
            ));
        }
        let lr = self.lr_at(epoch);
        let mu = self.config.momentum;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * gi;
                *pi += *vi;
            }
        }
        Ok(())
    }
}
