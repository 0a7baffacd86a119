use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers; empty until the first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Option<ParamSet>,
}

impl SgdState {
    pub fn reset(&mut self) {
        self.velocity = None;
    }
}

/// One step of SGD with heavy-ball momentum and L2 weight decay:
/// `m' = momentum * m + (grad + weight_decay * p)`, `p' = p - lr * m'`.
pub fn sgd_step(
    params: &ParamSet,
    grads: &ParamSet,
    cfg: &OptimConfig,
    state: &SgdState,
) -> Result<(ParamSet, SgdState)> {
    params.expect_same_layout(grads)?;
    if !grads.is_finite() {
        return Err(Error::Numeric("refusing SGD step with non-finite gradient".into()));
    }
    let direction = grads.zip_map(params, |g, p| g + cfg.weight_decay * p)?;
    let velocity = match &state.velocity {
        Some(m) => m.zip_map(&direction, |m, d| cfg.momentum * m + d)?,
        None => direction,
    };
    let next = params.zip_map(&velocity, |p, m| p - cfg.lr * m)?;
    Ok((
        next,
        SgdState {
            velocity: Some(velocity),
        },
    ))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    first: Option<ParamSet>,
    second: Option<ParamSet>,
    steps: i32,
}

/// Bias-corrected adaptive-moment step.
pub fn adam_step(params: &ParamSet, grads: &ParamSet, lr: f64, state: &mut AdamState) -> Result<ParamSet> {
    params.expect_same_layout(grads)?;
    if !grads.is_finite() {
        return Err(Error::Numeric("refusing Adam step with non-finite gradient".into()));
    }
    let zeros = grads.zeros_like();
    let m = state
        .first
        .as_ref()
        .unwrap_or(&zeros)
        .zip_map(grads, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
    let v = state
        .second
        .as_ref()
        .unwrap_or(&zeros)
        .zip_map(grads, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
    state.steps += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.steps);
    let c2 = 1.0 - ADAM_BETA2.powi(state.steps);
    let step = m.zip_map(&v, |m, v| (m / c1) / ((v / c2).sqrt() + ADAM_EPS))?;
    let next = params.zip_map(&step, |p, s| p - lr * s)?;
    state.first = Some(m);
    state.second = Some(v);
    Ok(next)
}
