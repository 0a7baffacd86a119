use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "round,client_id,train_loss,test_acc,grad_sq_norm,hypernet_drift,extractor_drift,seconds";

/// One client's numbers for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    /// Mean over the round's optimizer steps of the squared gradient norm
    /// taken over every trained parameter group.
    pub grad_sq_norm: f64,
    /// `None` when the algorithm has no client hypernetwork or when there
    /// is no previous round to compare with.
    pub hypernet_drift: Option<f64>,
    pub extractor_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    pub seconds: f64,
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mean_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = it.flatten().collect();
    (!v.is_empty()).then(|| mean_of(v.into_iter()))
}

impl RoundRecord {
    pub fn mean_train_loss(&self) -> f64 {
        mean_of(self.clients.iter().map(|c| c.train_loss))
    }

    pub fn mean_test_acc(&self) -> f64 {
        mean_of(self.clients.iter().map(|c| c.test_acc))
    }

    pub fn mean_grad_sq_norm(&self) -> f64 {
        mean_of(self.clients.iter().map(|c| c.grad_sq_norm))
    }

    pub fn mean_hypernet_drift(&self) -> Option<f64> {
        mean_opt(self.clients.iter().map(|c| c.hypernet_drift))
    }

    pub fn mean_extractor_drift(&self) -> Option<f64> {
        mean_opt(self.clients.iter().map(|c| c.extractor_drift))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders records as CSV: one row per client and a `_mean` row per round.
///
/// Numbers use the shortest round-tripping decimal form, so equal runs give
/// equal bytes.
pub fn to_csv(records: &[RoundRecord]) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        for c in &r.clients {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.round,
                c.client_id,
                c.train_loss,
                c.test_acc,
                c.grad_sq_norm,
                opt(c.hypernet_drift),
                opt(c.extractor_drift),
                r.seconds
            );
        }
        let _ = writeln!(
            s,
            "{},_mean,{},{},{},{},{},{}",
            r.round,
            r.mean_train_loss(),
            r.mean_test_acc(),
            r.mean_grad_sq_norm(),
            opt(r.mean_hypernet_drift()),
            opt(r.mean_extractor_drift()),
            r.seconds
        );
    }
    s
}

/// Parses CSV written by [`to_csv`]; `_mean` rows are recomputed, not read.
pub fn from_csv(input: impl Read) -> Result<Vec<RoundRecord>> {
    let mut lines = BufReader::new(input).lines();
    let bad = |msg: String| Error::Format(format!("metrics CSV: {msg}"));
    let header = lines
        .next()
        .transpose()
        .map_err(|e| bad(e.to_string()))?
        .ok_or_else(|| bad("empty file".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
    let optnum = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let mut out: Vec<RoundRecord> = Vec::new();
    for line in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields in `{line}`")));
        }
        if f[1] == "_mean" {
            continue;
        }
        let round: usize = f[0].parse().map_err(|_| bad(format!("bad round `{}`", f[0])))?;
        let client = ClientRecord {
            client_id: f[1].parse().map_err(|_| bad(format!("bad client id `{}`", f[1])))?,
            train_loss: num(f[2])?,
            test_acc: num(f[3])?,
            grad_sq_norm: num(f[4])?,
            hypernet_drift: optnum(f[5])?,
            extractor_drift: optnum(f[6])?,
        };
        let seconds = num(f[7])?;
        match out.last_mut() {
            Some(r) if r.round == round => r.clients.push(client),
            Some(r) if r.round > round => {
                return Err(bad(format!("round {round} after round {}", r.round)))
            }
            _ => out.push(RoundRecord {
                round,
                clients: vec![client],
                seconds,
            }),
        }
    }
    Ok(out)
}

/// Per-quartile averages of the training-round series, plus trend flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    /// Number of training rounds summarized (round 0 is excluded).
    pub rounds: usize,
    pub grad_sq_norm_quartiles: [f64; 4],
    pub train_loss_quartiles: [f64; 4],
    pub test_acc_quartiles: [f64; 4],
    pub extractor_drift_quartiles: Option<[f64; 4]>,
    pub hypernet_drift_quartiles: Option<[f64; 4]>,
    /// Cumulative average of the per-round mean squared gradient norm.
    pub running_grad_sq_norm: Vec<f64>,
    pub extractor_drift: Vec<Option<f64>>,
    pub hypernet_drift: Vec<Option<f64>>,
    pub grad_norm_nonincreasing: bool,
    pub grad_norm_last_below_half_first: bool,
    pub extractor_drift_decreased: Option<bool>,
    pub loss_decreased: bool,
    pub final_test_acc: f64,
}

/// Bounds of quartile `q` (0..4) over `n` items; never empty when `n > 0`.
pub fn quartile_range(q: usize, n: usize) -> std::ops::Range<usize> {
    let lo = (q * n / 4).min(n.saturating_sub(1));
    let hi = ((q + 1) * n / 4).max(lo + 1);
    lo..hi
}

fn quartiles(series: &[f64]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (q, o) in out.iter_mut().enumerate() {
        let r = quartile_range(q, series.len());
        *o = mean_of(series[r].iter().copied());
    }
    out
}

fn opt_quartiles(series: &[Option<f64>]) -> Option<[f64; 4]> {
    let v: Option<Vec<f64>> = series.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| quartiles(&v))
}

/// Summarizes a run. Records with `round == 0` describe the initial state
/// and are skipped.
pub fn convergence_stats(records: &[RoundRecord]) -> Result<ConvergenceSummary> {
    let train: Vec<&RoundRecord> = records.iter().filter(|r| r.round > 0).collect();
    if records.len() < 2 || train.is_empty() {
        return Err(Error::Consistency(format!(
            "convergence summary needs 2 records including a training round, got {} ({} training)",
            records.len(),
            train.len()
        )));
    }
    let g: Vec<f64> = train.iter().map(|r| r.mean_grad_sq_norm()).collect();
    let loss: Vec<f64> = train.iter().map(|r| r.mean_train_loss()).collect();
    let acc: Vec<f64> = train.iter().map(|r| r.mean_test_acc()).collect();
    let ed: Vec<Option<f64>> = train.iter().map(|r| r.mean_extractor_drift()).collect();
    let hd: Vec<Option<f64>> = train.iter().map(|r| r.mean_hypernet_drift()).collect();
    let mut running = Vec::with_capacity(g.len());
    let mut acc_sum = 0.0;
    for (i, v) in g.iter().enumerate() {
        acc_sum += v;
        running.push(acc_sum / (i + 1) as f64);
    }
    let gq = quartiles(&g);
    let lq = quartiles(&loss);
    // Drift needs a previous round, so the first training round may be blank.
    let ed_tail: Vec<Option<f64>> = ed.iter().skip_while(|d| d.is_none()).copied().collect();
    let hd_tail: Vec<Option<f64>> = hd.iter().skip_while(|d| d.is_none()).copied().collect();
    let edq = opt_quartiles(&ed_tail);
    Ok(ConvergenceSummary {
        rounds: train.len(),
        grad_sq_norm_quartiles: gq,
        train_loss_quartiles: lq,
        test_acc_quartiles: quartiles(&acc),
        extractor_drift_quartiles: edq,
        hypernet_drift_quartiles: opt_quartiles(&hd_tail),
        running_grad_sq_norm: running,
        extractor_drift: ed,
        hypernet_drift: hd,
        grad_norm_nonincreasing: gq.windows(2).all(|w| w[1] <= w[0]),
        grad_norm_last_below_half_first: gq[3] <= 0.5 * gq[0],
        extractor_drift_decreased: edq.map(|q| q[3] < q[0]),
        loss_decreased: lq[3] < lq[0],
        final_test_acc: *acc.last().expect("non-empty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, g: f64, drift: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            clients: vec![
                ClientRecord {
                    client_id: 0,
                    train_loss: g,
                    test_acc: 0.5,
                    grad_sq_norm: g,
                    hypernet_drift: None,
                    extractor_drift: drift,
                },
                ClientRecord {
                    client_id: 1,
                    train_loss: g,
                    test_acc: 0.75,
                    grad_sq_norm: g,
                    hypernet_drift: None,
                    extractor_drift: drift,
                },
            ],
            seconds: 0.0,
        }
    }

    #[test]
    fn constant_series_has_equal_quartiles() {
        let rs: Vec<RoundRecord> = (0..=20).map(|t| rec(t, 2.0, Some(1.0))).collect();
        let s = convergence_stats(&rs).unwrap();
        assert!(s.grad_sq_norm_quartiles.iter().all(|&q| q == 2.0));
        assert!(s.grad_norm_nonincreasing);
        assert_eq!(s.extractor_drift_decreased, Some(false));
        assert_eq!(s.rounds, 20);
    }

    #[test]
    fn inverse_sqrt_series_decreases() {
        let rs: Vec<RoundRecord> = (1..=40).map(|t| rec(t, 1.0 / (t as f64).sqrt(), None)).collect();
        let s = convergence_stats(&rs).unwrap();
        let q = s.grad_sq_norm_quartiles;
        assert!(q[0] > q[1] && q[1] > q[2] && q[2] > q[3]);
        // independent arithmetic on the first quartile: t = 1..=10
        let first: f64 = (1..=10).map(|t| 1.0 / (t as f64).sqrt()).sum::<f64>() / 10.0;
        assert!((q[0] - first).abs() < 1e-15);
        assert_eq!(s.extractor_drift_quartiles, None);
    }

    #[test]
    fn quartile_ranges_cover_small_runs() {
        for n in 1..12 {
            for q in 0..4 {
                let r = quartile_range(q, n);
                assert!(r.start < r.end && r.end <= n, "{n} {q} {r:?}");
            }
        }
        assert_eq!(quartile_range(0, 100), 0..25);
        assert_eq!(quartile_range(3, 100), 75..100);
    }

    #[test]
    fn csv_roundtrip_and_means() {
        let rs = vec![rec(0, 1.0, None), rec(1, 0.5, Some(0.25))];
        let csv = to_csv(&rs);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("1,_mean,0.5,0.625,0.5,,0.25,0\n"));
        assert_eq!(from_csv(csv.as_bytes()).unwrap(), rs);
    }

    #[test]
    fn too_few_rounds() {
        assert!(convergence_stats(&[rec(1, 1.0, None)]).is_err());
        assert!(convergence_stats(&[rec(0, 1.0, None), rec(0, 1.0, None)]).is_err());
    }

    #[test]
    fn single_round_summary_is_that_round() {
        let s = convergence_stats(&[rec(0, 3.0, None), rec(1, 0.7, Some(0.2))]).unwrap();
        assert_eq!(s.rounds, 1);
        assert!(s.grad_sq_norm_quartiles.iter().all(|&q| q == 0.7));
        assert_eq!(s.extractor_drift_quartiles, Some([0.2; 4]));
    }
}
