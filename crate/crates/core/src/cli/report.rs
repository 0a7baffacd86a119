use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attack::{ATTACK_DIR, ATTACK_SUMMARY};
use super::train::{write_file, write_json, FinalAccuracy, FINAL_ACCURACY, METRICS_CSV};
use crate::attack::SUMMARY_HEADER;
use crate::error::{Error, Result};
use crate::metrics::{convergence_stats, from_csv, ConvergenceSummary, RoundRecord};

pub const REPORT_DIR: &str = "report";
pub const REPORT_SUMMARY: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMeans {
    pub round: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub grad_sq_norm: f64,
    pub hypernet_drift: Option<f64>,
    pub extractor_drift: Option<f64>,
}

impl From<&RoundRecord> for RoundMeans {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            train_loss: r.mean_train_loss(),
            test_acc: r.mean_test_acc(),
            grad_sq_norm: r.mean_grad_sq_norm(),
            hypernet_drift: r.mean_hypernet_drift(),
            extractor_drift: r.mean_extractor_drift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub method: String,
    pub samples: usize,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub mean_analytic_psnr: Option<f64>,
    pub max_analytic_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rounds: usize,
    pub last_round: RoundMeans,
    pub final_accuracy: Option<FinalAccuracy>,
    /// Absent when the run has no training round.
    pub convergence: Option<ConvergenceSummary>,
    pub attack: Vec<AttackStats>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-method means of an attack summary CSV.
pub fn attack_stats(csv: &str, origin: &Path) -> Result<Vec<AttackStats>> {
    let bad = |msg: String| Error::Format(format!("{}: {msg}", origin.display()));
    let mut lines = csv.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
        }
    };
    // method -> (psnr, ssim, analytic psnr, analytic error)
    let mut by_method: Vec<(String, [Vec<f64>; 4])> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("line {}: expected 9 fields, got {}", i + 2, f.len())));
        }
        let method = f[3].to_string();
        let slot = match by_method.iter().position(|(m, _)| *m == method) {
            Some(p) => p,
            None => {
                by_method.push((method, Default::default()));
                by_method.len() - 1
            }
        };
        let cols = &mut by_method[slot].1;
        for (k, idx) in [4, 5, 8, 7].into_iter().enumerate() {
            if let Some(v) = num(f[idx])? {
                cols[k].push(v);
            }
        }
        if num(f[4])?.is_none() {
            return Err(bad(format!("line {}: missing psnr", i + 2)));
        }
    }
    Ok(by_method
        .into_iter()
        .map(|(method, c)| AttackStats {
            method,
            samples: c[0].len(),
            mean_psnr: mean(&c[0]).unwrap_or(f64::NAN),
            mean_ssim: mean(&c[1]),
            mean_analytic_psnr: mean(&c[2]),
            max_analytic_error: c[3].iter().copied().reduce(f64::max),
        })
        .collect())
}

fn series_csv(records: &[RoundRecord], value: impl Fn(&RoundRecord) -> Option<f64>) -> String {
    let mut s = String::from("round,value\n");
    for r in records {
        let v = value(r).map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{v}\n", r.round));
    }
    s
}

/// `report` subcommand: consolidates a run directory into
/// `report/summary.json` plus one `round,value` CSV per metric.
pub fn emit_report(run_dir: &Path) -> Result<(RunReport, PathBuf)> {
    let metrics_path = run_dir.join(METRICS_CSV);
    let records = from_csv(read(&metrics_path)?.as_bytes())
        .map_err(|e| Error::Format(format!("{}: {e}", metrics_path.display())))?;
    let last = records
        .last()
        .ok_or_else(|| Error::Format(format!("{}: no rounds recorded", metrics_path.display())))?;
    let acc_path = run_dir.join(FINAL_ACCURACY);
    let final_accuracy = if acc_path.exists() {
        Some(
            serde_json::from_str(&read(&acc_path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", acc_path.display())))?,
        )
    } else {
        None
    };
    let convergence = if records.iter().any(|r| r.round > 0) && records.len() >= 2 {
        Some(convergence_stats(&records)?)
    } else {
        None
    };
    let attack_path = run_dir.join(ATTACK_DIR).join(ATTACK_SUMMARY);
    let attack = if attack_path.exists() {
        attack_stats(&read(&attack_path)?, &attack_path)?
    } else {
        Vec::new()
    };
    let report = RunReport {
        rounds: records.iter().filter(|r| r.round > 0).count(),
        last_round: last.into(),
        final_accuracy,
        convergence,
        attack,
    };
    let dir = run_dir.join(REPORT_DIR);
    let series: [(&str, Box<dyn Fn(&RoundRecord) -> Option<f64>>); 5] = [
        ("train_loss", Box::new(|r| Some(r.mean_train_loss()))),
        ("test_acc", Box::new(|r| Some(r.mean_test_acc()))),
        ("grad_sq_norm", Box::new(|r| Some(r.mean_grad_sq_norm()))),
        ("hypernet_drift", Box::new(|r| r.mean_hypernet_drift())),
        ("extractor_drift", Box::new(|r| r.mean_extractor_drift())),
    ];
    for (name, f) in &series {
        write_file(&dir.join(format!("{name}.csv")), series_csv(&records, f).as_bytes())?;
    }
    let summary = dir.join(REPORT_SUMMARY);
    write_json(&summary, &report)?;
    Ok((report, summary))
}
