//! SGD and Adam with multiplicative per-epoch learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimizer state across steps; moments are keyed by parameter name.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    base_lr: f64,
    /// Multiplicative decay applied at each epoch boundary.
    gamma: f64,
    epochs_elapsed: u32,
    slots: BTreeMap<String, AdamSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, gamma: f64) -> Self {
        Optimizer {
            kind,
            base_lr: lr,
            gamma,
            epochs_elapsed: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Current effective learning rate.
    pub fn lr(&self) -> f64 {
        self.base_lr * self.gamma.powi(self.epochs_elapsed as i32)
    }

    /// Apply decay at an epoch boundary.
    pub fn end_epoch(&mut self) {
        self.epochs_elapsed += 1;
    }

    /// One update for a named parameter in place.
    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(format!(
                "optimizer step `{name}`: param {} vs grad {}",
                param.len(),
                grad.len()
            )));
        }
        let lr = self.lr();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let slot = self.slots.entry(name.to_string()).or_default();
                if slot.m.is_empty() {
                    slot.m = vec![0.0; param.len()];
                    slot.v = vec![0.0; param.len()];
                }
                if slot.m.len() != param.len() {
                    return Err(Error::shape(format!(
                        "optimizer moments for `{name}` have stale size"
                    )));
                }
                slot.t += 1;
                let bc1 = 1.0 - BETA1.powi(slot.t as i32);
                let bc2 = 1.0 - BETA2.powi(slot.t as i32);
                for i in 0..param.len() {
                    slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * grad[i];
                    slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    param[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
                }
            }
        }
        Ok(())
    }
}
