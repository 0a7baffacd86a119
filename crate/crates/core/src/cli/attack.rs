use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::train::{load_snapshot, write_file, write_json, SNAPSHOT_DIR};
use crate::attack::{capture, run_attack, score, summary_csv, AttackConfig, AttackReport, SampleReport};
use crate::error::{Error, Result};
use crate::fedsim::{Algorithm, Simulator};

pub const ATTACK_DIR: &str = "attack";
pub const ATTACK_REPORT: &str = "report.json";
pub const ATTACK_SUMMARY: &str = "summary.csv";

/// Run directory a snapshot belongs to.
pub fn run_dir_of(snapshot: &Path) -> PathBuf {
    let parent = snapshot.parent().unwrap_or(Path::new("."));
    match (parent.file_name(), parent.parent()) {
        (Some(n), Some(root)) if n == SNAPSHOT_DIR => root.to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

/// Attacks `cfg.samples` single training images: sample `s` is image
/// `s / m` (wrapping) of client `s % m`.
pub fn attack_simulator(sim: &Simulator, cfg: &AttackConfig) -> Result<Vec<SampleReport>> {
    cfg.validate()?;
    if sim.config().algorithm == Algorithm::Local {
        return Err(Error::Capability(
            "local-only snapshots contain no transmitted gradients to attack".into(),
        ));
    }
    let m = sim.clients.len();
    (0..cfg.samples)
        .into_par_iter()
        .map(|s| {
            let c = s % m;
            let train = &sim.clients[c].train;
            let (x, y) = train.sample((s / m) % train.len());
            let (t, truth) = capture(sim, c, &x, y)?;
            let out = run_attack(&t, cfg)?;
            score(s, &t, &out, &truth)
        })
        .collect()
}

/// `attack` subcommand. Writes `attack/report.json` and
/// `attack/summary.csv` under the snapshot's run directory.
pub fn run_attack_files(snapshot: &Path, cfg: &AttackConfig) -> Result<AttackReport> {
    let (_, sim) = load_snapshot(snapshot)?;
    let samples = attack_simulator(&sim, cfg)?;
    let dir = run_dir_of(snapshot).join(ATTACK_DIR);
    write_file(&dir.join(ATTACK_SUMMARY), summary_csv(&samples).as_bytes())?;
    let report = AttackReport {
        config: cfg.clone(),
        samples,
    };
    write_json(&dir.join(ATTACK_REPORT), &report)?;
    Ok(report)
}
