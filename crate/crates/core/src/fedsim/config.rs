use serde::{Deserialize, Serialize};

use crate::diffnet::OptimConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Client-side hypernetworks; only hypernetwork parameters are shared.
    Hyperfl,
    Fedavg,
    /// Every client trains alone; nothing is exchanged.
    Local,
    /// FedAvg with clipped, noised uploads.
    DpFedavg,
    /// One server-side hypernetwork generating every client's full model.
    Pfedhn,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hyperfl => "hyperfl",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Local => "local",
            Algorithm::DpFedavg => "dp-fedavg",
            Algorithm::Pfedhn => "pfedhn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

fn default_local_epochs() -> usize {
    5
}
fn default_classifier_epochs() -> usize {
    1
}
fn local_sgd(lr: f64) -> OptimConfig {
    OptimConfig {
        lr,
        momentum: 0.5,
        weight_decay: 5e-4,
    }
}
fn default_eta_g() -> OptimConfig {
    local_sgd(0.1)
}
fn default_eta_small() -> OptimConfig {
    local_sgd(0.01)
}
fn default_batch_size() -> usize {
    100
}
fn default_rate() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    200
}

/// Which gradient the per-step norm diagnostic measures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum GradNormSource {
    /// Gradient of the client's whole local objective at each iterate.
    #[default]
    Full,
    /// The minibatch gradient the step actually used.
    Batch,
}

/// Per-round training schedule.
///
/// `eta_g` trains the classifier in HyperFL and the whole model in the
/// other algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// Epochs of the joint hypernetwork/embedding phase (all the local
    /// training for the baselines).
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// Epochs of the classifier phase in HyperFL.
    #[serde(default = "default_classifier_epochs")]
    pub classifier_epochs: usize,
    #[serde(default = "default_eta_g")]
    pub eta_g: OptimConfig,
    #[serde(default = "default_eta_small")]
    pub eta_h: OptimConfig,
    #[serde(default = "default_eta_small")]
    pub eta_v: OptimConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub grad_norm: GradNormSource,
}

impl Default for RoundConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sample_rate {} not in (0, 1]",
                self.sample_rate
            )));
        }
        self.eta_g.validate()?;
        self.eta_h.validate()?;
        self.eta_v.validate()
    }
}

fn default_sigma() -> f64 {
    1e-5
}

/// Upload sanitization. `clip_norm: None` disables clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: Some(1.0),
            sigma: default_sigma(),
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be >= 0", self.sigma)));
        }
        if self.sigma > 0.0 && self.clip_norm.is_none() {
            return Err(Error::Config("noise needs a finite clip_norm".into()));
        }
        Ok(())
    }
}

fn default_server_lr() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PfedhnConfig {
    #[serde(default = "default_server_lr")]
    pub server_lr: f64,
}

impl Default for PfedhnConfig {
    fn default() -> Self {
        Self {
            server_lr: default_server_lr(),
        }
    }
}
