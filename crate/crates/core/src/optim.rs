//! SGD with momentum and Adam, both with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// SGD only.
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub eps: f32,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f32, weight_decay: f32) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { kind: OptimizerKind::Sgd, momentum, ..Self::adam(lr, weight_decay) }
    }

    /// Adam, lr 3e-4, weight decay 1e-4: the downstream fine-tuning setting.
    pub fn finetune_default() -> Self {
        Self::adam(3e-4, 1e-4)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("optimizer {name} must be a non-negative number, got {v}")));
            }
        }
        if self.kind == OptimizerKind::Adam && (self.beta1 >= 1.0 || self.beta2 >= 1.0) {
            return Err(Error::Config("adam betas must be below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    first: Vec<f32>,
    second: Vec<f32>,
    steps: u64,
}

/// Optimizer with per-parameter state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, slots: BTreeMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Update `param` in place from `grad`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let OptimizerConfig { kind, lr, weight_decay, momentum, beta1, beta2, eps } = self.config;
        let n = param.numel();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        });
        if slot.first.len() != n {
            return Err(Error::Shape(format!(
                "optimizer state for {name} has {} entries, parameter {n}",
                slot.first.len()
            )));
        }
        slot.steps += 1;
        let decay = 1.0 - lr * weight_decay;
        let p = param.data_mut();
        let g = grad.data();
        match kind {
            OptimizerKind::Sgd => {
                for i in 0..n {
                    p[i] *= decay;
                    slot.first[i] = momentum * slot.first[i] + g[i];
                    p[i] -= lr * slot.first[i];
                }
            }
            OptimizerKind::Adam => {
                let t = slot.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..n {
                    p[i] *= decay;
                    slot.first[i] = beta1 * slot.first[i] + (1.0 - beta1) * g[i];
                    slot.second[i] = beta2 * slot.second[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = slot.first[i] / c1;
                    let v_hat = slot.second[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
