//! First-order optimizers with per-parameter learning rates.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::network::{Model, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

/// Optimizer state keyed by parameter; iteration order is deterministic.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: BTreeMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn reset(&mut self) {
        self.slots.clear();
    }

    /// Applies one update. `lr` gives the effective rate for each parameter.
    pub fn step(&mut self, model: &mut Model, grads: &[(ParamId, Vec<f64>)], lr: impl Fn(ParamId) -> f64) {
        for (id, g) in grads {
            let rate = lr(*id);
            let slot = self.slots.entry(*id).or_insert_with(|| Slot {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
                steps: 0,
            });
            slot.steps += 1;
            let param = model.param_mut(*id);
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((p, gi), buf) in param.iter_mut().zip(g).zip(&mut slot.first) {
                        *buf = if slot.steps == 1 { *gi } else { momentum * *buf + gi };
                        *p -= rate * *buf;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(slot.steps);
                    let c2 = 1.0 - beta2.powi(slot.steps);
                    for (((p, gi), m), v) in param.iter_mut().zip(g).zip(&mut slot.first).zip(&mut slot.second) {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        *p -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
