//! Command-line front end: experiment files, training runs, attacks on
//! saved snapshots, and report generation.
//!
//! A run directory looks like
//!
//! ```text
//! config.resolved.json     the configuration actually used
//! partition.json           client shards as dataset indices
//! metrics.csv              one row per (round, client) plus a _mean row
//! final_accuracy.json      per-client test accuracy after the last round
//! snapshots/round_NNNN.ckpt
//! attack/report.json, attack/summary.csv
//! report/summary.json, report/<metric>.csv
//! ```

mod attack;
mod config;
mod report;
mod train;

pub use attack::{attack_simulator, run_attack_files, run_dir_of, ATTACK_DIR, ATTACK_REPORT, ATTACK_SUMMARY};
pub use config::{
    attack_schema, experiment_schema, load_experiment, parse_json, read_json, DataSource, ExperimentConfig,
    PartitionConfig, SEED_ENV,
};
pub use report::{attack_stats, emit_report, AttackStats, RoundMeans, RunReport, REPORT_DIR, REPORT_SUMMARY};
pub use train::{
    build_simulator, load_and_partition, load_snapshot, manifest, run_experiment, run_partition, snapshot_path,
    ClientAccuracy, FinalAccuracy, PartitionManifest, SnapshotMeta, TrainOutcome, FINAL_ACCURACY, METRICS_CSV,
    PARTITION_JSON, RESOLVED_CONFIG, SNAPSHOT_DIR,
};
