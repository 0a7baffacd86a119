//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test --release --test acceptance`.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{attack_sample, attack_simulator, convergence_config, gradient_checks, run_records, sentinel_check};
use hyperfl::attack::{analytic_from_transcript, capture, run_attack, score, AttackConfig, SampleReport};
use hyperfl::datakit::{partition, synth_dataset, PartitionSpec};
use hyperfl::diffnet::ParamSet;
use hyperfl::fedsim::{aggregate, dp_sanitize, DpConfig, Simulator};
use hyperfl::metrics::convergence_stats;
use hyperfl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64, 0u64);
    for seed in 0..20 {
        for (name, err) in gradient_checks(seed) {
            if !(err <= worst.1) {
                worst = (name, err, seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.1 < 1e-4 && secs < 60.0,
        format!("worst relative error {:.2e} ({} on instance {}), {secs:.1}s", worst.1, worst.0, worst.2),
    )
}

fn set(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap());
    p.insert("b", Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    p
}

fn aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut identities = true;
    for _ in 0..200 {
        let m = rng.gen_range(1..12);
        let uploads: Vec<ParamSet> = (0..m).map(|_| set(&mut rng)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let out = aggregate(&uploads, &w).unwrap();
        for (name, t) in out.iter() {
            for (k, v) in t.data().iter().enumerate() {
                let want: f64 = uploads.iter().zip(&w).map(|(u, wi)| wi * u.get(name).unwrap().data()[k]).sum();
                worst = worst.max((v - want).abs());
            }
        }
        identities &= aggregate(&uploads[..1], &[1.0]).unwrap() == uploads[0];
        let same = vec![uploads[0].clone(); m];
        identities &= aggregate(&same, &vec![1.0 / m as f64; m]).unwrap() == uploads[0];
    }
    outcome(
        worst <= 1e-12 && identities,
        format!("max deviation from brute force {worst:.1e}, identities exact: {identities}"),
    )
}

fn partitioner() -> Outcome {
    let ds = synth_dataset(10, 4, 300, 2.0, 3).unwrap();
    let spec = PartitionSpec::dominant(10, 5, 3, 600);
    let a = partition(&ds, &spec, 10, 9).unwrap();
    let exact = a.iter().all(|s| {
        s.uniform_indices.len() == 120
            && s.dominant_indices.len() == 480
            && s.dominant_indices.iter().all(|&i| s.dominant.contains(&ds.y[i]))
    });
    let deterministic = a == partition(&ds, &spec, 10, 9).unwrap();
    outcome(
        exact && deterministic,
        format!("10 clients: 120 uniform + 480 dominant each: {exact}; deterministic: {deterministic}"),
    )
}

fn dp_mechanism(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut clipped = true;
    for _ in 0..1000 {
        let u = set(&mut rng).scale(rng.gen_range(0.01..100.0));
        let c = rng.gen_range(0.1..10.0);
        let out = dp_sanitize(&u, &DpConfig { clip_norm: Some(c), sigma: 0.0 }, &mut rng).unwrap();
        clipped &= out.norm() <= c;
    }
    let mut zeros = ParamSet::new();
    zeros.insert("w", Tensor::zeros(&[100_000]));
    let (c, sigma) = (1.5, 0.4);
    let noisy = dp_sanitize(&zeros, &DpConfig { clip_norm: Some(c), sigma }, &mut rng).unwrap();
    let x = noisy.get("w").unwrap().data();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt();
    let std_ok = (std / (sigma * c) - 1.0).abs() < 0.05;

    let csv = |alg: &str, dp: serde_json::Value| {
        let run = dir.join(format!("dp-{alg}"));
        let mut v = small_experiment(&run, alg, 5);
        v["dp"] = dp;
        let cfg = dir.join(format!("dp-{alg}.json"));
        std::fs::write(&cfg, v.to_string()).unwrap();
        train(&cfg);
        std::fs::read(run.join("metrics.csv")).unwrap()
    };
    let same = csv("fedavg", json!({})) == csv("dp-fedavg", json!({"clip_norm": null, "sigma": 0.0}));
    outcome(
        clipped && std_ok && same,
        format!(
            "clipped norms <= C: {clipped}; noise std {std:.4} vs {:.4}; sigma=0, C=inf CSV identical to FedAvg: {same}",
            sigma * c
        ),
    )
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let (cfg, pairs) = convergence_config(1);
    let mut sim = Simulator::new(cfg, pairs).unwrap();
    let records = run_records(&mut sim);
    let s = convergence_stats(&records).unwrap();
    let q = s.grad_sq_norm_quartiles;
    let d = s.extractor_drift_quartiles.unwrap_or([f64::NAN; 4]);
    let acc = sim.final_accuracies().unwrap();
    let mean_acc = acc.iter().sum::<f64>() / acc.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mean_acc >= 0.85 && q[3] <= 0.5 * q[0] && d[3] < d[0] && secs < 600.0,
        format!(
            "accuracy {mean_acc:.3}; grad norm quartiles {:.3?} (last/first {:.2}); extractor drift {:.4} -> {:.4}; {secs:.0}s",
            q,
            q[3] / q[0],
            d[0],
            d[3]
        ),
    )
}

struct AttackRun {
    reports: Vec<SampleReport>,
    analytic_worst: Option<f64>,
}

fn attack_run(algorithm: &str, cfg: &AttackConfig) -> AttackRun {
    let sim = attack_simulator(algorithm);
    let results: Vec<(SampleReport, Option<f64>)> = (0..10)
        .into_par_iter()
        .map(|s| {
            let (client, x, label) = attack_sample(&sim, s);
            let (t, truth) = capture(&sim, client, &x, label).unwrap();
            let analytic = analytic_from_transcript(&t)
                .ok()
                .map(|r| r.sub(&truth.x.reshape(&[truth.x.len()]).unwrap()).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            let out = run_attack(&t, cfg).unwrap();
            (score(s, &t, &out, &truth).unwrap(), analytic)
        })
        .collect();
    let analytic: Vec<Option<f64>> = results.iter().map(|r| r.1).collect();
    AttackRun {
        analytic_worst: analytic
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.into_iter().fold(0.0, f64::max)),
        reports: results.into_iter().map(|r| r.0).collect(),
    }
}

fn mean_psnr(r: &AttackRun) -> f64 {
    r.reports.iter().map(|s| s.psnr).sum::<f64>() / r.reports.len() as f64
}

fn psnrs(r: &AttackRun) -> String {
    let v: Vec<String> = r.reports.iter().map(|s| format!("{:.1}", s.psnr)).collect();
    v.join(" ")
}

fn small_experiment(out: &Path, algorithm: &str, rounds: usize) -> serde_json::Value {
    json!({
        "algorithm": algorithm,
        "dataset": {"kind": "synthetic", "classes": 5, "dim": 20, "per_class": 200, "separation": 2.0},
        "partition": {"clients": 6, "samples_per_client": 120},
        "model": {
            "net": {"layers": [
                {"kind": "dense", "input": 20, "output": 16},
                {"kind": "leaky_relu"},
                {"kind": "dense", "input": 16, "output": 5},
                {"kind": "softmax_xent"}
            ]},
            "extractor_layers": 2
        },
        "hypernet": {"hidden_dim": 16, "embedding_dim": 8},
        "round": {"local_epochs": 2, "batch_size": 20, "rounds": rounds, "sample_rate": 0.5},
        "seed": 4,
        "output_dir": out
    })
}

fn train(cfg: &Path) {
    let o = Command::new(env!("CARGO_BIN_EXE_hyperfl"))
        .arg("train")
        .arg(cfg)
        .env_remove("HYPERFL_SEED")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn determinism(dir: &Path) -> Outcome {
    let mut files = Vec::new();
    for (i, threads) in [1, 1, 4].into_iter().enumerate() {
        let run = dir.join(format!("det{i}"));
        let mut v = small_experiment(&run, "hyperfl", 10);
        v["threads"] = json!(threads);
        let cfg = dir.join(format!("det{i}.json"));
        std::fs::write(&cfg, v.to_string()).unwrap();
        train(&cfg);
        files.push(std::fs::read(run.join("metrics.csv")).unwrap());
    }
    let repeat = files[0] == files[1];
    let threads = files[0] == files[2];
    outcome(
        repeat && threads,
        format!("repeat run identical: {repeat}; 1 vs 4 threads identical: {threads}"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient correctness", gradients());
    report(2, "aggregation exactness", aggregation());
    report(3, "partitioner fidelity", partitioner());
    report(4, "DP mechanism", dp_mechanism(dir.path()));
    report(5, "convergence", convergence());

    let cfg = AttackConfig {
        iterations: 2000,
        ..AttackConfig::default()
    };
    let fedavg = attack_run("fedavg", &cfg);
    let hyperfl = attack_run("hyperfl", &cfg);
    let pfedhn = attack_run("pfedhn", &cfg);
    let (f, h, p) = (mean_psnr(&fedavg), mean_psnr(&hyperfl), mean_psnr(&pfedhn));

    let analytic = fedavg.analytic_worst.unwrap_or(f64::INFINITY);
    let above = fedavg.reports.iter().filter(|s| s.psnr >= 20.0).count();
    report(
        6,
        "attack positive control",
        outcome(
            analytic <= 1e-10 && above >= 9,
            format!(
                "analytic max error {analytic:.1e}; IG >= 20 dB on {above}/10 [{}], mean {f:.2} dB",
                psnrs(&fedavg)
            ),
        ),
    );
    report(
        7,
        "attack negative result",
        outcome(
            h <= 12.0 && f - h >= 10.0,
            format!("bilevel mean {h:.2} dB [{}], {:.2} dB below the control", psnrs(&hyperfl), f - h),
        ),
    );
    report(
        8,
        "pFedHN susceptibility",
        outcome(
            (f - p).abs() <= 5.0,
            format!("IG mean {p:.2} dB [{}] vs control {f:.2} dB", psnrs(&pfedhn)),
        ),
    );
    let boundary = match sentinel_check(20) {
        Ok(n) => outcome(true, format!("{n} messages over 20 rounds, no private bytes")),
        Err(e) => outcome(false, e),
    };
    report(9, "privacy boundary", boundary);
    report(10, "determinism", determinism(dir.path()));

    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
