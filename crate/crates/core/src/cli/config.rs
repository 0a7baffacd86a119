use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::datakit::{consecutive_groups, load_idx, synth_dataset, synth_glyphs, Dataset, PartitionSpec};
use crate::diffnet::ModelSpec;
use crate::error::{Error, Result};
use crate::fedsim::{Algorithm, DpConfig, PfedhnConfig, RoundConfig, SimConfig};
use crate::hypernet::HypernetSpec;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "HYPERFL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian class blobs rescaled to `[0, 1]`.
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Stroke images, `side x side`.
    Glyphs {
        classes: usize,
        side: usize,
        per_class: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// MNIST-style IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
}

impl DataSource {
    pub fn load(&self, experiment_seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                classes,
                dim,
                per_class,
                separation,
                seed,
            } => synth_dataset(*classes, *dim, *per_class, *separation, seed.unwrap_or(experiment_seed)),
            DataSource::Glyphs {
                classes,
                side,
                per_class,
                seed,
            } => synth_glyphs(*classes, *side, *per_class, seed.unwrap_or(experiment_seed)),
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
    }
}

fn default_uniform_percent() -> f64 {
    20.0
}
fn default_window() -> usize {
    3
}
fn default_test_fraction() -> f64 {
    1.0 / 6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub samples_per_client: usize,
    #[serde(default = "default_uniform_percent")]
    pub uniform_percent: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Explicit dominant class sets. When absent, one window of
    /// `dominant_window` consecutive classes starts at every class.
    #[serde(default)]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_window")]
    pub dominant_window: usize,
}

impl PartitionConfig {
    pub fn spec(&self, classes: usize) -> PartitionSpec {
        PartitionSpec {
            uniform_percent: self.uniform_percent,
            groups: self
                .groups
                .clone()
                .unwrap_or_else(|| consecutive_groups(classes, classes, self.dominant_window)),
            samples_per_client: self.samples_per_client,
            test_fraction: self.test_fraction,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub dataset: DataSource,
    pub partition: PartitionConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub hypernet: HypernetSpec,
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub pfedhn: PfedhnConfig,
    /// Attack settings kept with the experiment for reference; the
    /// `attack` subcommand reads its own file.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write a snapshot every this many rounds; 0 keeps only the final one.
    #[serde(default)]
    pub snapshot_every: usize,
}

impl ExperimentConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            algorithm: self.algorithm,
            model: self.model.clone(),
            hypernet: self.hypernet.clone(),
            round: self.round.clone(),
            dp: self.dp.clone(),
            pfedhn: self.pfedhn.clone(),
            seed: self.seed,
            threads: self.threads,
            record_timing: self.record_timing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be >= 1".into()));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        self.sim_config().validate()
    }

    /// Applies `HYPERFL_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

/// Parses JSON text, reporting the line and column of the first problem.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}

/// Reads, applies the seed override, and validates an experiment file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = read_json(path)?;
    let cfg = cfg.with_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

/// JSON Schema of the experiment file.
pub fn experiment_schema() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes") + "\n"
}

/// JSON Schema of a standalone attack file.
pub fn attack_schema() -> String {
    let schema = schemars::schema_for!(AttackConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes") + "\n"
}
