use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    /// `1 - <g, t> / (|g| |t|)` over all tensors at once.
    Cosine,
    /// `sum |g - t|^2`.
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zeros,
    /// Uniform in `[0, 1]` drawn from `seed`.
    SeededUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

fn default_iterations() -> usize {
    10_000
}
fn default_step() -> f64 {
    0.1
}
fn default_tv() -> f64 {
    1e-6
}
fn default_seed() -> u64 {
    0
}
fn default_true() -> bool {
    true
}
fn default_trace_every() -> usize {
    100
}
fn default_samples() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_loss")]
    pub loss: GradLoss,
    /// Weight of the total-variation prior.
    #[serde(default = "default_tv")]
    pub tv: f64,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    /// Divide the step by 10 at 3/8, 5/8 and 7/8 of the budget.
    #[serde(default = "default_true")]
    pub step_decay: bool,
    /// Keep reconstructions inside `[0, 1]` after every step.
    #[serde(default = "default_true")]
    pub clamp: bool,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Number of single-image transcripts to attack.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_loss() -> GradLoss {
    GradLoss::Cosine
}
fn default_init() -> InitKind {
    InitKind::SeededUniform
}
fn default_optimizer() -> Optimizer {
    Optimizer::Adam
}

impl Default for AttackConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size {} must be positive", self.step_size)));
        }
        if !(self.tv >= 0.0 && self.tv.is_finite()) {
            return Err(Error::Config(format!("tv {} must be >= 0", self.tv)));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Step size in effect at iteration `it`.
    pub fn step_at(&self, it: usize) -> f64 {
        if !self.step_decay {
            return self.step_size;
        }
        let n = self.iterations;
        let drops = [3 * n / 8, 5 * n / 8, 7 * n / 8]
            .iter()
            .filter(|&&b| it >= b)
            .count();
        self.step_size * 0.1f64.powi(drops as i32)
    }
}
