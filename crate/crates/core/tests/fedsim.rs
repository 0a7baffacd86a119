mod common;

use common::{sentinel_check, small_sim};
use hyperfl::diffnet::{grad_params, sgd_step, Batch, ParamSet, SgdState};
use hyperfl::fedsim::{
    aggregate, client_rng, dp_sanitize, local_train_fedavg, local_train_hyperfl, sample_clients, Channel, Direction,
    DpConfig, Envelope, LocalModel, Payload,
};
use hyperfl::hypernet::hypernet_forward;
use hyperfl::metrics::to_csv;
use hyperfl::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap());
    p.insert("b", Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap());
    p
}

#[test]
fn aggregate_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let m = rng.gen_range(1..9);
        let uploads: Vec<ParamSet> = (0..m).map(|_| random_set(&mut rng)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let out = aggregate(&uploads, &weights).unwrap();
        for (name, t) in out.iter() {
            for k in 0..t.len() {
                let want: f64 = uploads.iter().zip(&weights).map(|(u, w)| w * u.get(name).unwrap().data()[k]).sum();
                assert!((t.data()[k] - want).abs() <= 1e-12 * want.abs().max(1.0), "{name}[{k}]");
                let (lo, hi) = uploads.iter().map(|u| u.get(name).unwrap().data()[k]).fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(l, h), v| (l.min(v), h.max(v)),
                );
                assert!(lo <= t.data()[k] && t.data()[k] <= hi);
            }
        }
    }
}

#[test]
fn aggregate_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = random_set(&mut rng);
    assert_eq!(aggregate(std::slice::from_ref(&u), &[1.0]).unwrap(), u);
    for m in 2..7 {
        let same = vec![u.clone(); m];
        assert_eq!(aggregate(&same, &vec![1.0 / m as f64; m]).unwrap(), u);
    }

    let one = |a: f64, b: f64| {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![a, b]));
        p
    };
    let out = aggregate(&[one(1.0, 3.0), one(3.0, 5.0)], &[0.5, 0.5]).unwrap();
    assert_eq!(out.get("w").unwrap().data(), &[2.0, 4.0]);

    // equal shard sizes give uniform weights
    let n = [600.0; 5];
    let w: Vec<f64> = n.iter().map(|v| v / n.iter().sum::<f64>()).collect();
    assert!(w.iter().all(|&x| x == 0.2));
}

#[test]
fn aggregate_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random_set(&mut rng), random_set(&mut rng));
    assert!(aggregate(&[], &[]).is_err());
    assert!(aggregate(&[a.clone(), b.clone()], &[0.5, 0.6]).is_err());
    assert!(aggregate(&[a.clone(), b.clone()], &[1.5, -0.5]).is_err());
    assert!(aggregate(&[a.clone()], &[0.5, 0.5]).is_err());
    let mut c = ParamSet::new();
    c.insert("a", Tensor::zeros(&[4, 3]));
    c.insert("b", Tensor::zeros(&[5]));
    assert!(aggregate(&[a, c], &[0.5, 0.5]).is_err());
    // within tolerance: renormalized
    assert!(aggregate(&[b.clone(), b], &[0.5, 0.5 + 1e-10]).is_ok());
}

#[test]
fn client_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(sample_clients(20, 1.0, &mut rng), (0..20).collect::<Vec<_>>());
    let s = sample_clients(100, 0.3, &mut rng);
    assert_eq!(s.len(), 30);
    assert!(s.windows(2).all(|w| w[0] < w[1]) && s[29] < 100);
    let a = sample_clients(100, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
    let b = sample_clients(100, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert_eq!(sample_clients(10, 0.01, &mut rng).len(), 1);
}

#[test]
fn last_round_has_everyone() {
    let mut sim = small_sim("fedavg", 6, 3, 0);
    let first = sim.run_round().unwrap();
    assert_eq!(first.clients.len(), 3);
    sim.run_round().unwrap();
    let last = sim.run_round().unwrap();
    assert_eq!(last.clients.iter().map(|c| c.client_id).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
}

fn dp(clip: Option<f64>, sigma: f64) -> DpConfig {
    DpConfig { clip_norm: clip, sigma }
}

#[test]
fn dp_clipping_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut u = ParamSet::new();
    u.insert("w", Tensor::from_vec(vec![6.0, 8.0]));
    let out = dp_sanitize(&u, &dp(Some(1.0), 0.0), &mut rng).unwrap();
    assert!(out.norm() <= 1.0);
    assert!((out.norm() - 1.0).abs() < 1e-15);
    assert_eq!(dp_sanitize(&u, &dp(Some(10.0), 0.0), &mut rng).unwrap(), u);
    for _ in 0..200 {
        let u = random_set(&mut rng);
        let c = rng.gen_range(1e-3..10.0);
        assert!(dp_sanitize(&u, &dp(Some(c), 0.0), &mut rng).unwrap().norm() <= c);
    }
    assert!(dp_sanitize(&u, &dp(None, 1.0), &mut rng).is_err());
    assert!(dp_sanitize(&u, &dp(Some(0.0), 0.0), &mut rng).is_err());
}

#[test]
fn dp_noise_has_the_requested_scale() {
    let mut u = ParamSet::new();
    u.insert("w", Tensor::zeros(&[100_000]));
    let (c, sigma) = (2.0, 0.35);
    let out = dp_sanitize(&u, &dp(Some(c), sigma), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let x = out.get("w").unwrap().data();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt();
    assert!((std / (sigma * c) - 1.0).abs() < 0.05, "std {std}");
}

#[test]
fn noiseless_unclipped_dp_is_fedavg() {
    let csv = |alg: &str| {
        let mut sim = small_sim(alg, 4, 4, 0);
        if alg == "dp-fedavg" {
            let mut cfg = sim.config().clone();
            cfg.dp = dp(None, 0.0);
            let pairs = sim.clients.iter().map(|c| (c.train.clone(), c.test.clone())).collect();
            sim = hyperfl::fedsim::Simulator::new(cfg, pairs).unwrap();
        }
        to_csv(&common::run_records(&mut sim))
    };
    assert_eq!(csv("fedavg"), csv("dp-fedavg"));
}

#[test]
fn zero_rates_leave_hyperfl_state_unchanged() {
    let mut sim = small_sim("hyperfl", 2, 1, 0);
    let mut cfg = sim.config().round.clone();
    for o in [&mut cfg.eta_g, &mut cfg.eta_h, &mut cfg.eta_v] {
        o.lr = 0.0;
    }
    let spec = sim.config().model.clone();
    let hyper = sim.hypernet_spec().clone();
    let phi_bar = sim.server.global.map_with(|v| v * 0.5);
    let before = sim.clients[0].model.clone();
    let out = local_train_hyperfl(&mut sim.clients[0], &phi_bar, &spec, &hyper, &cfg, &mut client_rng(1, 1, 0)).unwrap();
    assert_eq!(out.upload, phi_bar);
    let (LocalModel::Hyperfl { v: v0, phi_c: c0, .. }, LocalModel::Hyperfl { v: v1, phi_c: c1, .. }) =
        (&before, &sim.clients[0].model)
    else {
        panic!("not HyperFL")
    };
    assert_eq!(v0, v1);
    assert_eq!(c0, c1);
}

#[test]
fn classifier_step_matches_manual_composition() {
    let mut sim = small_sim("hyperfl", 2, 1, 0);
    let mut cfg = sim.config().round.clone();
    cfg.batch_size = 1000; // one full batch per epoch
    cfg.eta_h.lr = 0.0;
    cfg.eta_v.lr = 0.0;
    cfg.eta_h.weight_decay = 0.0;
    cfg.eta_v.weight_decay = 0.0;
    let spec = sim.config().model.clone();
    let hyper = sim.hypernet_spec().clone();
    let phi_bar = sim.server.global.clone();
    let client = sim.clients[0].clone();
    let LocalModel::Hyperfl { v, phi_c, .. } = &client.model else { panic!() };

    let theta = hypernet_forward(v, &phi_bar, &hyper).unwrap();
    let full = theta.merge(phi_c).unwrap();
    let g = grad_params(&full, &spec.net, Batch::new(&client.train.x, &client.train.y)).unwrap();
    let (_, g_c) = spec.split(&g);
    let (want, _) = sgd_step(phi_c, &g_c, &cfg.eta_g, &SgdState::default()).unwrap();

    local_train_hyperfl(&mut sim.clients[0], &phi_bar, &spec, &hyper, &cfg, &mut client_rng(1, 1, 0)).unwrap();
    let LocalModel::Hyperfl { phi_c: got, v: v_after, .. } = &sim.clients[0].model else { panic!() };
    assert_eq!(v_after, v);
    for (name, t) in want.iter() {
        let err = t.sub(got.get(name).unwrap()).unwrap().norm();
        // batch rows arrive shuffled, so only the summation order differs
        assert!(err < 1e-12, "{name}: {err}");
    }
}

#[test]
fn fedavg_local_update_oracles() {
    let mut sim = small_sim("fedavg", 2, 1, 0);
    let net = sim.config().model.net.clone();
    let global = sim.server.global.clone();

    let mut cfg = sim.config().round.clone();
    cfg.eta_g.lr = 0.0;
    let out = local_train_fedavg(&mut sim.clients[0], &global, &net, &cfg, &mut client_rng(1, 1, 0)).unwrap();
    assert_eq!(out.upload, global);

    let mut cfg = sim.config().round.clone();
    cfg.local_epochs = 1;
    cfg.batch_size = 1000;
    let c = &sim.clients[1];
    let g = grad_params(&global, &net, Batch::new(&c.train.x, &c.train.y)).unwrap();
    let (want, _) = sgd_step(&global, &g, &cfg.eta_g, &SgdState::default()).unwrap();
    let out = local_train_fedavg(&mut sim.clients[1], &global, &net, &cfg, &mut client_rng(1, 1, 1)).unwrap();
    assert!(want.sub(&out.upload).unwrap().norm() < 1e-12);
}

#[test]
fn symmetric_clients_upload_the_same() {
    let sim = small_sim("fedavg", 2, 1, 0);
    let net = sim.config().model.net.clone();
    let cfg = sim.config().round.clone();
    let (mut a, mut b) = (sim.clients[0].clone(), sim.clients[0].clone());
    let ua = local_train_fedavg(&mut a, &sim.server.global, &net, &cfg, &mut client_rng(3, 1, 0)).unwrap();
    let ub = local_train_fedavg(&mut b, &sim.server.global, &net, &cfg, &mut client_rng(3, 1, 0)).unwrap();
    assert_eq!(ua.upload, ub.upload);
    assert_eq!(aggregate(&[ua.upload.clone(), ub.upload], &[0.5, 0.5]).unwrap(), ua.upload);
}

#[test]
fn single_client_federation_is_local_training() {
    let mut sim = small_sim("fedavg", 1, 2, 0);
    sim.run_round().unwrap();
    let LocalModel::Full { params, .. } = &sim.clients[0].model else { panic!() };
    assert_eq!(&sim.server.global, params);
}

#[test]
fn frozen_pfedhn_clients_leave_the_server_unchanged() {
    let mut sim = small_sim("pfedhn", 3, 2, 0);
    let mut cfg = sim.config().clone();
    cfg.round.eta_g.lr = 0.0;
    let pairs = sim.clients.iter().map(|c| (c.train.clone(), c.test.clone())).collect();
    sim = hyperfl::fedsim::Simulator::new(cfg, pairs).unwrap();
    let (phi, emb) = (sim.server.global.clone(), sim.server.embeddings.clone());
    sim.run_round().unwrap();
    assert_eq!(sim.server.global, phi);
    assert_eq!(sim.server.embeddings, emb);
}

#[test]
fn pfedhn_moves_the_server_when_clients_learn() {
    let mut sim = small_sim("pfedhn", 3, 2, 0);
    let phi = sim.server.global.clone();
    sim.run_round().unwrap();
    assert!(sim.server.global.sub(&phi).unwrap().norm() > 0.0);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    for alg in ["hyperfl", "fedavg", "dp-fedavg", "pfedhn", "local"] {
        let runs: Vec<String> = [1, 2, 4]
            .iter()
            .map(|&t| to_csv(&common::run_records(&mut small_sim(alg, 5, 3, t))))
            .collect();
        assert_eq!(runs[0], runs[1], "{alg}");
        assert_eq!(runs[0], runs[2], "{alg}");
    }
}

#[test]
fn restored_snapshot_continues_identically() {
    for alg in ["hyperfl", "fedavg", "pfedhn", "local"] {
        let mut a = small_sim(alg, 4, 4, 0);
        a.run_round().unwrap();
        a.run_round().unwrap();
        let snap = a.snapshot();
        let tail_a: Vec<_> = (0..2).map(|_| a.run_round().unwrap()).collect();

        let mut b = small_sim(alg, 4, 4, 0);
        b.restore(&snap, 2).unwrap();
        assert_eq!(b.round(), 2);
        let tail_b: Vec<_> = (0..2).map(|_| b.run_round().unwrap()).collect();
        assert_eq!(to_csv(&tail_a), to_csv(&tail_b), "{alg}");
    }
}

#[test]
fn hyperfl_wire_never_carries_private_state() {
    let inspected = sentinel_check(20).unwrap();
    assert!(inspected >= 20 * 2 * 2, "{inspected}");
}

#[test]
fn boundary_guard_rejects_private_tensors() {
    let mut ch = Channel::new(hyperfl::fedsim::Algorithm::Hyperfl, ["hidden.weight".to_string()]);
    let mut p = ParamSet::new();
    p.insert("dense2.weight", Tensor::zeros(&[2, 2]));
    let env = |payload| Envelope { round: 1, client_id: 0, direction: Direction::ToServer, payload };
    assert!(matches!(ch.transmit(env(Payload::Hypernet), &p), Err(Error::Consistency(_))));
    assert!(matches!(ch.transmit(env(Payload::Model), &ParamSet::new()), Err(Error::Consistency(_))));

    // the detector itself: a FedAvg channel carries the model in the clear
    let mut open = Channel::new(hyperfl::fedsim::Algorithm::Fedavg, []);
    open.set_recording(true);
    let mut q = ParamSet::new();
    q.insert("w", Tensor::from_vec(vec![0.123456789, -2.5]));
    open.transmit(env(Payload::Model), &q).unwrap();
    assert_eq!(hyperfl::fedsim::find_values(&open.log()[0].bytes, &[-2.5]).len(), 1);
}
