//! SGD and LARS with momentum, plus the per-task warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Mat};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Lars,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// LARS trust coefficient.
    pub lars_eta: f64,
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of the base rate.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lars_eta: 0.02,
            warmup_epochs: 10,
            min_lr_ratio: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lars_eta > 0.0) {
            return Err(Error::Config("lars_eta must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to
/// `base * min_ratio` at `total`.
pub fn lr_at(base: f64, min_ratio: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Momentum optimiser. State is keyed by parameter id; call
/// [`Optimizer::reset`] to start a task with fresh momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    velocity: BTreeMap<ParamId, Mat>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// One update of every parameter that received a gradient.
    ///
    /// SGD decays every trainable tensor. LARS skips biases and norm
    /// parameters for both weight decay and trust-ratio scaling.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        let c = self.cfg;
        for (&id, g) in grads.iter() {
            let entry = store.get(id);
            if !entry.kind.is_trainable() {
                continue;
            }
            let w = &entry.value;
            let exempt = c.kind == OptimizerKind::Lars && entry.kind.is_excluded_from_adaptation();
            let wd = if exempt { 0.0 } else { c.weight_decay };
            let mut d = g.clone();
            if wd > 0.0 {
                d.scaled_add(wd, w);
            }
            if c.kind == OptimizerKind::Lars && !exempt {
                let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if wn > 0.0 && gn > 0.0 {
                    d *= c.lars_eta * wn / (gn + wd * wn);
                }
            }
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Mat::zeros(w.dim()));
            *v *= c.momentum;
            *v += &d;
            let v = v.clone();
            store.value_mut(id).scaled_add(-lr, &v);
        }
    }
}

/// BYOL target momentum for step `k` of `total`: ramps from `base` to 1
/// along a cosine.
pub fn ema_momentum(base: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    1.0 - (1.0 - base) * ((std::f64::consts::PI * p).cos() + 1.0) / 2.0
}
