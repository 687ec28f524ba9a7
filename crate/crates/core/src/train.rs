//! Optimizer settings and the per-step report shared by every stage trainer.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::objectives::{compose_objective, LossWeights, Stage, Term};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_g > 0.0
            && self.lr_d > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn generator(&self, vars: Vec<Var>) -> Result<Adam> {
        Adam::new(vars, self.lr_g, self.beta1, self.beta2)
    }

    pub fn critic(&self, vars: Vec<Var>) -> Result<Adam> {
        Adam::new(vars, self.lr_d, self.beta1, self.beta2)
    }
}

/// Plain Adam (decoupled weight decay fixed at zero).
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
        })
    }

    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        Ok(self.inner.backward_step(loss)?)
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }
}

/// Scalar losses of one alternating update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub parts: BTreeMap<Term, f64>,
    pub total: f64,
    pub critic: BTreeMap<String, f64>,
}

impl LossReport {
    /// Recomputes the generator total from the logged parts.
    pub fn recomputed_total(&self, stage: Stage, weights: &LossWeights) -> Result<f64> {
        compose_objective(stage, &self.parts, weights)
    }
}

/// Converts tensor parts to numbers, failing on any non-finite value.
pub fn finish_report(
    stage: Stage,
    parts: &BTreeMap<Term, Tensor>,
    total: &Tensor,
    critic: BTreeMap<String, f64>,
) -> Result<LossReport> {
    let mut out = BTreeMap::new();
    for (term, t) in parts {
        out.insert(*term, finite(stage, &format!("{term:?}"), scalar(t)?)?);
    }
    for (name, v) in &critic {
        finite(stage, name, *v)?;
    }
    Ok(LossReport {
        parts: out,
        total: finite(stage, "total", scalar(total)?)?,
        critic,
    })
}

pub fn finite(stage: Stage, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("{stage}: non-finite {what} ({v})")))
    }
}
