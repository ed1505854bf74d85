use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Real};

/// Single-cycle cosine decay from `base_lr` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let t = step.min(total) as f64 / total as f64;
    base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl Schedule {
    pub fn lr(self, step: usize, total: usize, base_lr: f64) -> f64 {
        match self {
            Schedule::Cosine => cosine_lr(step, total, base_lr),
            Schedule::Constant => base_lr,
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

/// Momentum SGD with L2 regularization folded into the gradient:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`. Decay applies to
/// weights only; frozen parameters are skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<F: Real>(&self, params: Vec<&mut Param<F>>, lr: f64) {
        let lr = F::from_f64_lossy(lr);
        let mu = F::from_f64_lossy(self.momentum);
        let wd = F::from_f64_lossy(self.weight_decay);
        for p in params {
            if p.frozen {
                continue;
            }
            let decay = p.kind.decays();
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(&mut p.velocity) {
                let mut d = *g;
                if decay {
                    d += wd * *w;
                }
                *v = mu * *v + d;
                *w -= lr * *v;
            }
        }
    }
}
