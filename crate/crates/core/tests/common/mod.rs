//! Oracles and fixtures shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use hyperfl::attack::{match_loss_graph, GradLoss};
use hyperfl::datakit::{consecutive_groups, partition, synth_dataset, synth_glyphs, PartitionSpec};
use hyperfl::diffnet::net::{grad_params_graph, leaf_params, VarParams};
use hyperfl::diffnet::{forward_loss, grad_input, grad_params, nested_grad, Batch, Layer, ModelSpec, NetSpec, ParamSet};
use hyperfl::fedsim::{hyperfl_grads, SimConfig, Simulator};
use hyperfl::hypernet::{hypernet_forward, hypernet_graph, init_hypernet, target_from_shapes, vjp_graph, HypernetSpec};
use hyperfl::metrics::RoundRecord;
use hyperfl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn fd_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = p[i];
            p[i] = x0 + FD_STEP;
            let hi = f(&p);
            p[i] = x0 - FD_STEP;
            let lo = f(&p);
            p[i] = x0;
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Rebuilds a parameter set with the same layout from a flat vector.
pub fn unflatten(like: &ParamSet, flat: &[f64]) -> ParamSet {
    let mut out = ParamSet::new();
    let mut at = 0;
    for (k, t) in like.iter() {
        let n = t.len();
        out.insert(k.clone(), Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec()).unwrap());
        at += n;
    }
    out
}

pub struct Instance {
    pub model: ModelSpec,
    pub hyper: HypernetSpec,
    pub params: ParamSet,
    pub phi: ParamSet,
    pub v: Tensor,
    pub phi_c: ParamSet,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Small random network, hypernetwork and batch.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..6);
    let h = rng.gen_range(2..6);
    let k = rng.gen_range(2..5);
    let act = if rng.gen_bool(0.5) { Layer::LeakyRelu } else { Layer::Relu };
    let deep = rng.gen_bool(0.3);
    let dims: Vec<usize> = if deep { vec![d, h, h + 1, k] } else { vec![d, h, k] };
    let net = NetSpec::mlp(&dims, act);
    let model = ModelSpec {
        net: net.clone(),
        extractor_layers: 2,
    };
    let params = net.init_params(&mut rng).map_with(|w| w + rng.gen_range(-0.3..0.3));
    let hyper = HypernetSpec {
        embedding_dim: rng.gen_range(2..5),
        hidden_dim: rng.gen_range(2..6),
        hidden_bias: rng.gen_bool(0.5),
        target: target_from_shapes(model.extractor_shapes()),
    };
    let (phi, _) = init_hypernet(&hyper, seed).unwrap();
    // lift head biases off zero so every path carries signal
    let phi = phi.map_with(|w| w + rng.gen_range(-0.2..0.2));
    let v = Tensor::from_vec((0..hyper.embedding_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (_, phi_c) = model.split(&params);
    let n = rng.gen_range(1..5);
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..k)).collect();
    Instance {
        model,
        hyper,
        params,
        phi,
        v,
        phi_c,
        x,
        y,
    }
}

/// Gradient-matching objective of `x` against `target`, built the same
/// way as the attack objective.
fn matching_value_and_grad(inst: &Instance, target: &ParamSet, kind: GradLoss, x: &Tensor) -> (f64, Vec<f64>) {
    let net = &inst.model.net;
    let (v, g) = nested_grad(&[x.clone()], |g, leaves| {
        let vp = leaf_params(g, &inst.params);
        let pred = grad_params_graph(g, net, &vp, leaves[0], &inst.y)?;
        match_loss_graph(g, kind, &pred, target)
    })
    .unwrap();
    (v, g[0].data().to_vec())
}

/// Embedding-search objective over `(v, theta)`, as in the HyperFL attack.
fn embedding_value_and_grad(inst: &Instance, observed: &ParamSet, v: &Tensor, theta: &ParamSet) -> (f64, Vec<f64>) {
    let names: Vec<String> = theta.names().cloned().collect();
    let mut inputs = vec![v.clone()];
    inputs.extend(theta.iter().map(|(_, t)| t.clone()));
    let (val, grads) = nested_grad(&inputs, |g, leaves| {
        let vv = leaves[0];
        let gen = hypernet_graph(&inst.hyper, &leaf_params(g, &inst.phi), vv)?;
        let mut cot = VarParams::new();
        for (i, n) in names.iter().enumerate() {
            cot.insert(n.clone(), gen[n].sub(leaves[i + 1])?);
        }
        let pred = vjp_graph(g, &inst.hyper, &inst.phi, vv, &cot)?;
        match_loss_graph(g, GradLoss::SquaredL2, &pred, observed)
    })
    .unwrap();
    (val, grads.iter().flat_map(|t| t.data().to_vec()).collect())
}

/// Every autodiff path checked against central differences on one
/// instance: `(name, relative error)`.
pub fn gradient_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let inst = random_instance(seed);
    let net = &inst.model.net;
    let batch = Batch::new(&inst.x, &inst.y);
    let mut out = Vec::new();

    let g = grad_params(&inst.params, net, batch).unwrap();
    let fd = fd_grad(&inst.params.flatten(), |p| {
        forward_loss(&unflatten(&inst.params, p), net, batch).unwrap()
    });
    out.push(("params", rel_err(&g.flatten(), &fd)));

    let gx = grad_input(&inst.params, net, batch).unwrap();
    let fd = fd_grad(inst.x.data(), |p| {
        let x = Tensor::new(inst.x.shape().to_vec(), p.to_vec()).unwrap();
        forward_loss(&inst.params, net, Batch::new(&x, &inst.y)).unwrap()
    });
    out.push(("input", rel_err(gx.data(), &fd)));

    // composition through the hypernetwork
    let hg = hyperfl_grads(net, &inst.hyper, &inst.v, &inst.phi, &inst.phi_c, &inst.x, &inst.y).unwrap();
    let loss_at = |phi: &ParamSet, v: &Tensor, phi_c: &ParamSet| {
        hyperfl_grads(net, &inst.hyper, v, phi, phi_c, &inst.x, &inst.y).unwrap().loss
    };
    let fd = fd_grad(&inst.phi.flatten(), |p| loss_at(&unflatten(&inst.phi, p), &inst.v, &inst.phi_c));
    out.push(("hypernet", rel_err(&hg.phi_h.flatten(), &fd)));
    let fd = fd_grad(inst.v.data(), |p| loss_at(&inst.phi, &Tensor::from_vec(p.to_vec()), &inst.phi_c));
    out.push(("embedding", rel_err(hg.v.data(), &fd)));
    let fd = fd_grad(&inst.phi_c.flatten(), |p| loss_at(&inst.phi, &inst.v, &unflatten(&inst.phi_c, p)));
    out.push(("classifier", rel_err(&hg.phi_c.flatten(), &fd)));

    // second order: gradient of a gradient-matching loss
    let target = g.map(|w| 0.7 * w + 0.01);
    for (name, kind) in [("nested_l2", GradLoss::SquaredL2), ("nested_cosine", GradLoss::Cosine)] {
        let x0 = inst.x.map(|v| v * 0.9 + 0.05);
        let (_, an) = matching_value_and_grad(&inst, &target, kind, &x0);
        let fd = fd_grad(x0.data(), |p| {
            let x = Tensor::new(x0.shape().to_vec(), p.to_vec()).unwrap();
            matching_value_and_grad(&inst, &target, kind, &x).0
        });
        out.push((name, rel_err(&an, &fd)));
    }

    // second order through the hypernetwork
    let theta = hypernet_forward(&inst.v, &inst.phi, &inst.hyper).unwrap();
    let theta_pert = theta.map(|w| w - 0.05);
    let observed = hg.phi_h.clone();
    let (_, an) = embedding_value_and_grad(&inst, &observed, &inst.v, &theta_pert);
    let mut flat = inst.v.data().to_vec();
    flat.extend(theta_pert.flatten());
    let d = inst.v.len();
    let fd = fd_grad(&flat, |p| {
        let v = Tensor::from_vec(p[..d].to_vec());
        embedding_value_and_grad(&inst, &observed, &v, &unflatten(&theta_pert, &p[d..])).0
    });
    out.push(("nested_hypernet", rel_err(&an, &fd)));
    out
}

/// The desk-scale convergence experiment: 3 Gaussian classes in 32
/// dimensions, 8 clients with IID shards of 300 samples, 100 rounds.
pub fn convergence_config(seed: u64) -> (SimConfig, Vec<(hyperfl::datakit::Dataset, hyperfl::datakit::Dataset)>) {
    let ds = synth_dataset(3, 32, 2000, 3.0, 11).unwrap();
    let spec = PartitionSpec {
        uniform_percent: 100.0,
        groups: consecutive_groups(3, 3, 1),
        samples_per_client: 300,
        test_fraction: 1.0 / 6.0,
    };
    let shards = partition(&ds, &spec, 8, 5).unwrap();
    let pairs = shards
        .iter()
        .map(|s| (ds.subset(&s.train_indices).unwrap(), ds.subset(&s.test_indices).unwrap()))
        .collect();
    let cfg: SimConfig = serde_json::from_value(serde_json::json!({
        "algorithm": "hyperfl",
        "model": {"net": NetSpec::mlp(&[32, 16, 3], Layer::LeakyRelu), "extractor_layers": 2},
        "round": {
            "local_epochs": 5,
            "batch_size": 50,
            "rounds": 100,
            "eta_g": {"lr": 0.1, "momentum": 0.5, "weight_decay": 5e-4},
            "eta_h": {"lr": 0.01, "momentum": 0.5, "weight_decay": 5e-4},
            "eta_v": {"lr": 0.01, "momentum": 0.5, "weight_decay": 5e-4}
        },
        "seed": seed
    }))
    .unwrap();
    (cfg, pairs)
}

pub fn run_records(sim: &mut Simulator) -> Vec<RoundRecord> {
    let mut recs = vec![sim.initial_record().unwrap()];
    for _ in 0..sim.config().round.rounds {
        recs.push(sim.run_round().unwrap());
    }
    recs
}

pub const ATTACK_CLIENTS: usize = 4;

/// Attack fixture: 16x16 glyphs in 10 classes split IID over 4 clients,
/// a 256-32-10 network, two short training rounds.
pub fn attack_simulator(algorithm: &str) -> Simulator {
    let ds = synth_glyphs(10, 16, 80, 3).unwrap();
    let spec = PartitionSpec {
        uniform_percent: 100.0,
        groups: consecutive_groups(10, 10, 3),
        samples_per_client: 180,
        test_fraction: 1.0 / 6.0,
    };
    let shards = partition(&ds, &spec, ATTACK_CLIENTS, 5).unwrap();
    let pairs = shards
        .iter()
        .map(|s| (ds.subset(&s.train_indices).unwrap(), ds.subset(&s.test_indices).unwrap()))
        .collect();
    let cfg: SimConfig = serde_json::from_value(serde_json::json!({
        "algorithm": algorithm,
        "model": {"net": NetSpec::mlp(&[256, 32, 10], Layer::LeakyRelu), "extractor_layers": 2},
        "hypernet": {"hidden_dim": 16},
        "round": {"local_epochs": 1, "batch_size": 50, "rounds": 2},
        "seed": 1
    }))
    .unwrap();
    let mut sim = Simulator::new(cfg, pairs).unwrap();
    for _ in 0..2 {
        sim.run_round().unwrap();
    }
    sim
}

/// A few-second federation on Gaussian blobs: `m` clients with non-IID
/// shards of 60 samples and an 8-6-3 network.
pub fn small_sim(algorithm: &str, m: usize, rounds: usize, threads: usize) -> Simulator {
    let ds = synth_dataset(3, 8, 200, 3.0, 2).unwrap();
    let spec = PartitionSpec {
        uniform_percent: 20.0,
        groups: consecutive_groups(3, 3, 2),
        samples_per_client: 60,
        test_fraction: 1.0 / 6.0,
    };
    let shards = partition(&ds, &spec, m, 3).unwrap();
    let pairs = shards
        .iter()
        .map(|s| (ds.subset(&s.train_indices).unwrap(), ds.subset(&s.test_indices).unwrap()))
        .collect();
    let cfg: SimConfig = serde_json::from_value(serde_json::json!({
        "algorithm": algorithm,
        "model": {"net": NetSpec::mlp(&[8, 6, 3], Layer::LeakyRelu), "extractor_layers": 2},
        "hypernet": {"hidden_dim": 8, "embedding_dim": 4},
        "round": {"local_epochs": 2, "batch_size": 20, "rounds": rounds, "sample_rate": 0.5},
        "dp": {"clip_norm": 1.0, "sigma": 1e-5},
        "seed": 7,
        "threads": threads
    }))
    .unwrap();
    Simulator::new(cfg, pairs).unwrap()
}

/// Overwrites every client's classifier and embedding with sentinel values,
/// runs `rounds` HyperFL rounds with the wire recorded, and searches every
/// serialized message for any value those private tensors ever held.
/// Returns the number of messages inspected.
pub fn sentinel_check(rounds: usize) -> Result<usize, String> {
    use hyperfl::fedsim::{find_values, LocalModel};
    let mut sim = small_sim("hyperfl", 4, rounds, 0);
    let mut k = 0u64;
    let mut sentinel = || {
        k += 1;
        // 0x1.5eaf... patterns do not arise from initialization or training
        f64::from_bits(0x3fb5_eaf0_0000_0000 | k) - 0.05
    };
    for c in &mut sim.clients {
        let LocalModel::Hyperfl { v, phi_c, .. } = &mut c.model else {
            return Err("not a HyperFL client".into());
        };
        v.data_mut().iter_mut().for_each(|x| *x = sentinel());
        for name in phi_c.names().cloned().collect::<Vec<_>>() {
            phi_c.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|x| *x = sentinel());
        }
    }
    let private = |sim: &Simulator| -> Vec<f64> {
        let mut out = Vec::new();
        for c in &sim.clients {
            if let LocalModel::Hyperfl { v, phi_c, .. } = &c.model {
                out.extend_from_slice(v.data());
                for (_, t) in phi_c.iter() {
                    out.extend_from_slice(t.data());
                }
            }
        }
        out
    };
    let mut secrets = private(&sim);
    sim.channel.set_recording(true);
    let mut inspected = 0;
    for round in 1..=rounds {
        let public: Vec<f64> = sim.server.global.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        sim.run_round().map_err(|e| e.to_string())?;
        secrets.extend(private(&sim));
        let log = sim.channel.take_log();
        if log.is_empty() {
            return Err(format!("round {round} sent no messages"));
        }
        for msg in &log {
            let hits = find_values(&msg.bytes, &secrets);
            if !hits.is_empty() {
                return Err(format!(
                    "round {round}, client {}: private bytes at offsets {hits:?}",
                    msg.envelope.client_id
                ));
            }
            // the detector must see what the message does carry
            if msg.envelope.direction == hyperfl::fedsim::Direction::ToClient
                && find_values(&msg.bytes, &public).is_empty()
            {
                return Err(format!("round {round}: detector found no hypernetwork bytes"));
            }
            inspected += 1;
        }
    }
    Ok(inspected)
}

/// Sample `s` of the attack fixture: client `s % 4`, that client's training
/// image `s / 4`.
pub fn attack_sample(sim: &Simulator, s: usize) -> (usize, Tensor, usize) {
    let client = s % ATTACK_CLIENTS;
    let train = &sim.clients[client].train;
    let i = s / ATTACK_CLIENTS;
    (client, train.x.select_rows(&[i]).unwrap(), train.y[i])
}
