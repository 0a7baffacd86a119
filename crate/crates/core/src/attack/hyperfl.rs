//! The two-stage attack on HyperFL transcripts.
//!
//! Stage one searches for an embedding `v` and a stand-in target `theta`
//! whose implied hypernetwork gradient `J_phi(v)^T (h(v; phi) - theta)`
//! matches the observed one; no classifier is needed. Stage two inverts the
//! generated extractor `h(v; phi)`. The server never sees an extractor
//! gradient, so the inversion can only pull the features of `x` towards
//! those of prior images; it is a deliberately simple stand-in for the
//! dedicated model-inversion attacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::AttackConfig;
use super::ig::Reconstruction;
use super::optimize::{init_input, match_loss_graph, minimize, tv_graph, TracePoint};
use super::transcript::{Observation, Transcript};
use crate::diffnet::net::{leaf_params, logits_graph, VarParams};
use crate::diffnet::{logits, nested_grad, NetSpec, ParamSet};
use crate::error::{Error, Result};
use crate::hypernet::{hypernet_forward, hypernet_graph, vjp_graph, HypernetSpec};
use crate::tensor::Tensor;

const V: &str = "v";
const THETA: &str = "theta/";
const PRIOR_IMAGES: usize = 32;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecovery {
    pub v: Tensor,
    pub theta: ParamSet,
    /// Gradient-matching loss at the returned point.
    pub residual: f64,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelOutcome {
    pub reconstruction: Reconstruction,
    pub embedding: EmbeddingRecovery,
}

fn hypernet_view(t: &Transcript) -> Result<(&HypernetSpec, &ParamSet, &ParamSet)> {
    match &t.observation {
        Observation::Hypernet { spec, phi, grads } => Ok((spec, phi, grads)),
        _ => Err(Error::Capability(format!(
            "{} transcript has no hypernetwork gradient",
            t.algorithm.name()
        ))),
    }
}

/// Hypernetwork gradient implied by `(v, theta)` under the regression
/// surrogate `1/2 |h(v; phi) - theta|^2`.
pub fn implied_hypernet_grad(spec: &HypernetSpec, phi: &ParamSet, v: &Tensor, theta: &ParamSet) -> Result<ParamSet> {
    let h = hypernet_forward(v, phi, spec)?;
    let cot = h.sub(theta)?;
    let (d_phi, _) = crate::hypernet::hypernet_backward(&cot, v, phi, spec)?;
    Ok(d_phi)
}

/// Starting point: a seeded standard-normal embedding and a target offset
/// from its generated parameters by seeded noise in `±0.1`.
fn random_start(spec: &HypernetSpec, phi: &ParamSet, seed: u64) -> Result<(Tensor, ParamSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x454d_4245_44);
    let v = Tensor::from_vec((0..spec.embedding_dim).map(|_| rng.sample(StandardNormal)).collect());
    let theta = hypernet_forward(&v, phi, spec)?.map_with(|p| p + rng.gen_range(-0.1..0.1));
    Ok((v, theta))
}

/// Joint search over `(v, theta)`. `start` overrides the random start.
pub fn recover_embedding(
    t: &Transcript,
    cfg: &AttackConfig,
    start: Option<(Tensor, ParamSet)>,
) -> Result<EmbeddingRecovery> {
    let (spec, phi, observed) = hypernet_view(t)?;
    let (v0, theta0) = match start {
        Some(s) => s,
        None => random_start(spec, phi, cfg.seed)?,
    };
    let mut init = theta0.with_prefix(THETA);
    init.insert(V, v0);
    let names: Vec<String> = init.names().cloned().collect();
    let objective = |p: &ParamSet| -> Result<(f64, ParamSet)> {
        let inputs: Vec<Tensor> = names.iter().map(|n| p.require(n).cloned()).collect::<Result<_>>()?;
        let (loss, grads) = nested_grad(&inputs, |g, leaves| {
            let by_name: VarParams = names.iter().cloned().zip(leaves.iter().copied()).collect();
            let v = by_name[V];
            let generated = hypernet_graph(spec, &leaf_params(g, phi), v)?;
            let mut cot = VarParams::new();
            for (k, h) in &generated {
                cot.insert(k.clone(), h.sub(by_name[&format!("{THETA}{k}")])?);
            }
            let pred = vjp_graph(g, spec, phi, v, &cot)?;
            match_loss_graph(g, cfg.loss, &pred, observed)
        })?;
        Ok((loss, names.iter().cloned().zip(grads).collect()))
    };
    let out = minimize(init, cfg, objective, |p| p)?;
    Ok(EmbeddingRecovery {
        v: out.best.require(V)?.clone(),
        theta: out.best.strip_prefix(THETA),
        residual: out.best_loss,
        trace: out.trace,
    })
}

fn extractor_net(t: &Transcript) -> NetSpec {
    NetSpec {
        layers: t.model.net.layers[..t.model.extractor_layers].to_vec(),
    }
}

/// Recovers the embedding, generates the extractor, then inverts it by
/// matching the per-feature mean and spread of prior images (seeded uniform
/// noise) under a total-variation prior.
pub fn hyperfl_bilevel_attack(t: &Transcript, cfg: &AttackConfig) -> Result<BilevelOutcome> {
    let (spec, phi, _) = hypernet_view(t)?;
    let embedding = recover_embedding(t, cfg, None)?;
    let theta = hypernet_forward(&embedding.v, phi, spec)?;
    let ext = extractor_net(t);
    let d = t.input_dim();
    let (rows, cols) = t.grid();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_494f_52);
    let prior = Tensor::new(
        vec![PRIOR_IMAGES, d],
        (0..PRIOR_IMAGES * d).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let feats = logits(&theta, &ext, &prior)?;
    let f = feats.cols();
    let mean: Vec<f64> = (0..f)
        .map(|j| (0..PRIOR_IMAGES).map(|i| feats.row(i)[j]).sum::<f64>() / PRIOR_IMAGES as f64)
        .collect();
    let inv_std: Vec<f64> = (0..f)
        .map(|j| {
            let var = (0..PRIOR_IMAGES).map(|i| (feats.row(i)[j] - mean[j]).powi(2)).sum::<f64>()
                / PRIOR_IMAGES as f64;
            1.0 / (var.sqrt() + STD_FLOOR)
        })
        .collect();
    let mean = Tensor::new(vec![1, f], mean)?;
    let weights = std::rc::Rc::new(Tensor::new(vec![1, f], inv_std)?);

    let objective = |p: &ParamSet| -> Result<(f64, ParamSet)> {
        let x = p.require("x")?.clone();
        let (loss, mut grads) = nested_grad(&[x], |g, leaves| {
            let vp = leaf_params(g, &theta);
            let out = logits_graph(&ext, &vp, leaves[0].reshape(&[1, d])?)?;
            let z = out.sub(g.constant(mean.clone()))?.mul_const(weights.clone())?;
            let mut obj = z.sq_norm()?.scale(1.0 / f as f64);
            if cfg.tv > 0.0 {
                obj = obj.add(tv_graph(g, leaves[0], rows, cols)?.scale(cfg.tv))?;
            }
            Ok(obj)
        })?;
        Ok((loss, [("x".to_string(), grads.pop().expect("x"))].into_iter().collect()))
    };
    let init: ParamSet = [("x".to_string(), init_input(cfg, d))].into_iter().collect();
    let clamp = cfg.clamp;
    let out = minimize(init, cfg, objective, |p| {
        if clamp {
            p.map(|v| v.clamp(0.0, 1.0))
        } else {
            p
        }
    })?;
    Ok(BilevelOutcome {
        reconstruction: Reconstruction {
            x: out.best.require("x")?.clone(),
            loss: out.best_loss,
            trace: out.trace,
        },
        embedding,
    })
}
