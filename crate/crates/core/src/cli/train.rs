use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::datakit::{partition, ClientShard, Dataset};
use crate::diffnet::checkpoint;
use crate::error::{Error, Result};
use crate::fedsim::Simulator;
use crate::metrics::{to_csv, RoundRecord};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const FINAL_ACCURACY: &str = "final_accuracy.json";
pub const PARTITION_JSON: &str = "partition.json";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Text stored in a snapshot's metadata field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub round: usize,
    pub aborted: bool,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: usize,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAccuracy {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: usize,
    pub mean_test_acc: f64,
    pub clients: Vec<ClientAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub seed: u64,
    pub dataset_size: usize,
    pub classes: usize,
    pub clients: Vec<ClientShard>,
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Loads the dataset and splits it across clients.
pub fn load_and_partition(cfg: &ExperimentConfig) -> Result<(Dataset, Vec<ClientShard>)> {
    let ds = cfg.dataset.load(cfg.seed)?;
    let spec = cfg.partition.spec(ds.classes);
    let shards = partition(&ds, &spec, cfg.partition.clients, cfg.seed)?;
    Ok((ds, shards))
}

pub fn manifest(cfg: &ExperimentConfig, ds: &Dataset, shards: Vec<ClientShard>) -> PartitionManifest {
    PartitionManifest {
        seed: cfg.seed,
        dataset_size: ds.len(),
        classes: ds.classes,
        clients: shards,
    }
}

/// `partition` subcommand: writes only the manifest.
pub fn run_partition(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let (ds, shards) = load_and_partition(cfg)?;
    let path = cfg.output_dir.join(PARTITION_JSON);
    write_json(&path, &manifest(cfg, &ds, shards))?;
    Ok(path)
}

pub fn build_simulator(cfg: &ExperimentConfig, ds: &Dataset, shards: &[ClientShard]) -> Result<Simulator> {
    let pairs = shards
        .iter()
        .map(|s| Ok((ds.subset(&s.train_indices)?, ds.subset(&s.test_indices)?)))
        .collect::<Result<Vec<_>>>()?;
    Simulator::new(cfg.sim_config(), pairs)
}

pub fn snapshot_path(dir: &Path, round: usize, aborted: bool) -> PathBuf {
    let name = if aborted {
        format!("abort_round_{round:04}.ckpt")
    } else {
        format!("round_{round:04}.ckpt")
    };
    dir.join(SNAPSHOT_DIR).join(name)
}

fn save_snapshot(cfg: &ExperimentConfig, sim: &Simulator, aborted: bool) -> Result<PathBuf> {
    let meta = SnapshotMeta {
        round: sim.round(),
        aborted,
        experiment: cfg.clone(),
    };
    let meta = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let path = snapshot_path(&cfg.output_dir, sim.round(), aborted);
    write_file(&path, &checkpoint::encode(&sim.snapshot(), &meta))?;
    Ok(path)
}

/// Reads a snapshot and rebuilds the simulator it came from.
pub fn load_snapshot(path: &Path) -> Result<(SnapshotMeta, Simulator)> {
    let (params, meta) = checkpoint::load(path)?;
    let meta: SnapshotMeta = serde_json::from_str(&meta)
        .map_err(|e| Error::Format(format!("{}: snapshot metadata: {e}", path.display())))?;
    let (ds, shards) = load_and_partition(&meta.experiment)?;
    let mut sim = build_simulator(&meta.experiment, &ds, &shards)?;
    sim.restore(&params, meta.round)?;
    Ok((meta, sim))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<RoundRecord>,
    pub final_accuracy: FinalAccuracy,
    pub snapshots: Vec<PathBuf>,
}

/// `train` subcommand. On a numeric failure mid-run the current state is
/// saved as an abort snapshot and the metrics so far are written before
/// the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let (ds, shards) = load_and_partition(cfg)?;
    let mut sim = build_simulator(cfg, &ds, &shards)?;
    write_json(&out.join(PARTITION_JSON), &manifest(cfg, &ds, shards))?;

    let mut records = vec![sim.initial_record()?];
    let mut snapshots = Vec::new();
    let rounds = cfg.round.rounds;
    for r in 1..=rounds {
        match sim.run_round() {
            Ok(rec) => {
                log::info!("round {r}: mean test accuracy {:.4}", rec.mean_test_acc());
                records.push(rec)
            }
            Err(e) => {
                if matches!(e, Error::Numeric(_) | Error::DegenerateGradient(_)) {
                    save_snapshot(cfg, &sim, true)?;
                }
                write_file(&out.join(METRICS_CSV), to_csv(&records).as_bytes())?;
                return Err(e);
            }
        }
        if cfg.snapshot_every > 0 && r % cfg.snapshot_every == 0 && r != rounds {
            snapshots.push(save_snapshot(cfg, &sim, false)?);
        }
    }
    snapshots.push(save_snapshot(cfg, &sim, false)?);
    write_file(&out.join(METRICS_CSV), to_csv(&records).as_bytes())?;

    let accs = sim.final_accuracies()?;
    let final_accuracy = FinalAccuracy {
        algorithm: cfg.algorithm.name().to_string(),
        seed: cfg.seed,
        rounds,
        mean_test_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        clients: accs
            .iter()
            .enumerate()
            .map(|(client_id, &test_acc)| ClientAccuracy { client_id, test_acc })
            .collect(),
    };
    write_json(&out.join(FINAL_ACCURACY), &final_accuracy)?;
    Ok(TrainOutcome {
        records,
        final_accuracy,
        snapshots,
    })
}
