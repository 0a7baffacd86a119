use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Dominant-class partition settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    /// Percent of each shard drawn uniformly from the whole dataset.
    #[serde(default = "default_uniform_percent")]
    pub uniform_percent: f64,
    /// Dominant class sets; clients are split evenly across them.
    pub groups: Vec<Vec<usize>>,
    pub samples_per_client: usize,
    /// Fraction of each shard held out as that client's test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_uniform_percent() -> f64 {
    20.0
}

fn default_test_fraction() -> f64 {
    1.0 / 6.0
}

impl PartitionSpec {
    /// The usual layout: `n_groups` windows of `window` consecutive classes.
    pub fn dominant(classes: usize, n_groups: usize, window: usize, samples_per_client: usize) -> Self {
        Self {
            uniform_percent: default_uniform_percent(),
            groups: consecutive_groups(classes, n_groups, window),
            samples_per_client,
            test_fraction: default_test_fraction(),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..=100.0).contains(&self.uniform_percent) {
            return Err(Error::Config(format!(
                "uniform_percent must lie in [0, 100], got {}",
                self.uniform_percent
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.samples_per_client == 0 {
            return Err(Error::Config("samples_per_client must be positive".into()));
        }
        if self.groups.is_empty() || self.groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Config("need at least one non-empty dominant group".into()));
        }
        if let Some(c) = self.groups.iter().flatten().find(|&&c| c >= classes) {
            return Err(Error::Config(format!(
                "dominant class {c} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    pub fn uniform_count(&self) -> usize {
        (self.uniform_percent / 100.0 * self.samples_per_client as f64).round() as usize
    }
}

/// Group `g` of `n_groups` gets classes `start, start+1, ..` (mod `classes`)
/// with `start = g * classes / n_groups`.
pub fn consecutive_groups(classes: usize, n_groups: usize, window: usize) -> Vec<Vec<usize>> {
    (0..n_groups)
        .map(|g| {
            let start = g * classes / n_groups;
            (0..window).map(|k| (start + k) % classes).collect()
        })
        .collect()
}

/// One client's share of the dataset, as indices into the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub group: usize,
    pub dominant: Vec<usize>,
    pub uniform_indices: Vec<usize>,
    pub dominant_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientShard {
    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.uniform_indices.iter().chain(&self.dominant_indices).copied()
    }
}

/// Splits `ds` across `m` clients. Client `i` belongs to group
/// `i * groups / m`. Within a client, draws are without replacement; the
/// pool is reused across clients, so shards may overlap.
pub fn partition(ds: &Dataset, spec: &PartitionSpec, m: usize, seed: u64) -> Result<Vec<ClientShard>> {
    spec.validate(ds.classes)?;
    if m == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let n = spec.samples_per_client;
    let n_uniform = spec.uniform_count();
    let n_dominant = n - n_uniform;
    if n > ds.len() {
        return Err(Error::Capacity(format!(
            "{n} samples per client requested but the dataset holds {}",
            ds.len()
        )));
    }
    let n_groups = spec.groups.len();
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let mut shards = Vec::with_capacity(m);
    for client in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(client as u64);
        let group = client * n_groups / m;
        let dominant = spec.groups[group].clone();

        let mut all: Vec<usize> = (0..ds.len()).collect();
        all.shuffle(&mut rng);
        let uniform_indices = all[..n_uniform].to_vec();
        let mut taken = vec![false; ds.len()];
        for &i in &uniform_indices {
            taken[i] = true;
        }
        let mut pool: Vec<usize> = (0..ds.len())
            .filter(|&i| !taken[i] && dominant.contains(&ds.y[i]))
            .collect();
        if pool.len() < n_dominant {
            return Err(Error::Capacity(format!(
                "client {client}: {n_dominant} draws from classes {dominant:?} needed, {} available",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(n_dominant);
        let dominant_indices = pool;

        let mut order: Vec<usize> = uniform_indices.iter().chain(&dominant_indices).copied().collect();
        order.shuffle(&mut rng);
        let test_indices = order[..n_test].to_vec();
        let train_indices = order[n_test..].to_vec();
        shards.push(ClientShard {
            client_id: client,
            group,
            dominant,
            uniform_indices,
            dominant_indices,
            train_indices,
            test_indices,
        });
    }
    Ok(shards)
}
