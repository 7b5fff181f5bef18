//! First-order optimizers over named parameter stores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Linear decay of the learning rate to zero over the run.
    pub linear_decay: bool,
}

impl OptimizerConfig {
    pub fn validate(&self, section: &str) -> Vec<String> {
        if self.lr > 0.0 && self.lr.is_finite() {
            Vec::new()
        } else {
            vec![format!("{section}.lr = {} must be positive", self.lr)]
        }
    }
}

/// Plain gradient descent or Adam, with optional linear learning-rate
/// decay over `total_steps`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    total_steps: usize,
    t: usize,
    m: GradMap,
    v: GradMap,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, total_steps: usize) -> Self {
        Self { cfg, total_steps: total_steps.max(1), t: 0, m: GradMap::new(), v: GradMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Learning rate of the next step.
    pub fn current_lr(&self) -> f64 {
        if self.cfg.linear_decay {
            self.cfg.lr * (1.0 - self.t as f64 / self.total_steps as f64).max(0.0)
        } else {
            self.cfg.lr
        }
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        let lr = self.current_lr();
        self.t += 1;
        for (name, g) in grads {
            let p = store.get_mut(name).ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::State(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape())));
            }
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - BETA1.powi(self.t as i32);
                    let c2 = 1.0 - BETA2.powi(self.t as i32);
                    for (((x, d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * d;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * d * d;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
