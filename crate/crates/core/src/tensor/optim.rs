use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    AdaGrad,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "adagrad" => Ok(Self::AdaGrad),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::AdaGrad => "adagrad",
        })
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer hyperparameters plus per-parameter accumulators keyed by
/// parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let eps = match kind {
            OptimizerKind::Adam => 1e-8,
            OptimizerKind::AdaGrad => 1e-10,
        };
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn adagrad(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::AdaGrad, lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every named parameter that carries a gradient.
    ///
    /// All gradients are checked before anything is written, so a non-finite
    /// gradient leaves parameters and accumulators untouched. Parameters whose
    /// gradient is absent or identically zero are skipped.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of `{name}`"),
                        detail: format!("element {i} is {}", g[i]),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.take_grad() else { continue };
            if grad.iter().all(|&g| g == 0.0) {
                tensor.set_grad(grad)?;
                continue;
            }
            let n = tensor.len();
            let acc = self.moments.entry(name.to_string()).or_default();
            if acc.second.len() != n {
                acc.first = vec![0.0; n];
                acc.second = vec![0.0; n];
            }
            let values = tensor.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    for i in 0..n {
                        let g = grad[i];
                        acc.first[i] = b1 * acc.first[i] + (1.0 - b1) * g;
                        acc.second[i] = b2 * acc.second[i] + (1.0 - b2) * g * g;
                        let m_hat = acc.first[i] / bc1;
                        let v_hat = acc.second[i] / bc2;
                        values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
                OptimizerKind::AdaGrad => {
                    for i in 0..n {
                        let g = grad[i];
                        acc.second[i] += g * g;
                        values[i] -= self.lr * g / (acc.second[i].sqrt() + self.eps);
                    }
                }
            }
            tensor.set_grad(grad)?;
        }
        Ok(())
    }
}

/// Scales every row of a 2-D table to unit L2 norm; zero rows stay zero.
pub fn l2_renormalize_rows(table: &mut Tensor) {
    let cols = table.cols();
    if cols == 0 {
        return;
    }
    for row in table.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}
