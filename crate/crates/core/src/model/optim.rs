use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelError, Param, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub(super) fn code(self) -> u8 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
        }
    }

    pub(super) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Adam),
            1 => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("unknown optimizer `{s}` (expected adam or sgd)")),
        }
    }
}

/// Everything an optimizer carries between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Named moment buffers (`adam.m.<param>`, `adam.v.<param>`).
    pub slots: Vec<(String, Tensor)>,
}

/// Adam with bias correction (`epsilon` 1e-7), or plain SGD.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            state: OptimizerState {
                kind,
                step: 0,
                slots: Vec::new(),
            },
        }
    }

    pub fn adam(lr: f32) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.state.kind
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn restore(&mut self, state: OptimizerState) {
        self.state = state;
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(ModelError::GradientCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.state.step += 1;
        match self.state.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.state.slots.is_empty() {
                    for p in params.iter() {
                        let z = Tensor::zeros(p.value.shape())?;
                        self.state.slots.push((format!("adam.m.{}", p.name), z.clone()));
                        self.state.slots.push((format!("adam.v.{}", p.name), z));
                    }
                }
                if self.state.slots.len() != 2 * params.len() {
                    return Err(ModelError::GradientCount {
                        expected: self.state.slots.len() / 2,
                        got: params.len(),
                    });
                }
                let t = self.state.step as i32;
                let (b1, b2) = (self.beta1, self.beta2);
                let lr_t = self.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (ms, vs) = self.state.slots.split_at_mut(2 * i + 1);
                    let (m, v) = (ms[2 * i].1.data_mut(), vs[0].1.data_mut());
                    for (((w, &d), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        *w -= lr_t * *m / (v.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
