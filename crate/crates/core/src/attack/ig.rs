//! Gradient inversion against transcripts that expose the whole model.

use super::config::AttackConfig;
use super::optimize::{init_input, match_loss_graph, minimize, tv_graph, TracePoint};
use super::transcript::Transcript;
use crate::diffnet::net::{grad_params_graph, leaf_params};
use crate::diffnet::{nested_grad, ParamSet};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

const INPUT: &str = "x";

/// Bias-gradient magnitude below which a row is useless for recovery.
pub const BIAS_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Flat input, `input_dim` entries.
    pub x: Tensor,
    pub loss: f64,
    pub trace: Vec<TracePoint>,
}

fn single(x: Tensor) -> ParamSet {
    [(INPUT.to_string(), x)].into_iter().collect()
}

/// Recovers `x` by minimizing gradient mismatch plus `cfg.tv` times total
/// variation, starting from the configured initialization.
pub fn ig_attack(t: &Transcript, cfg: &AttackConfig) -> Result<Reconstruction> {
    let (params, observed) = t.full_model()?;
    let net = &t.model.net;
    let d = t.input_dim();
    let (rows, cols) = t.grid();
    if rows * cols != d {
        return Err(dim_err!("{rows}x{cols} grid for a {d}-dimensional input"));
    }
    let labels = [t.label];
    let objective = |p: &ParamSet| -> Result<(f64, ParamSet)> {
        let x = p.require(INPUT)?.clone();
        let (loss, mut grads) = nested_grad(&[x], |g, leaves| {
            let vp = leaf_params(g, params);
            let row = leaves[0].reshape(&[1, d])?;
            let pred = grad_params_graph(g, net, &vp, row, &labels)?;
            let mut obj = match_loss_graph(g, cfg.loss, &pred, observed)?;
            if cfg.tv > 0.0 {
                obj = obj.add(tv_graph(g, leaves[0], rows, cols)?.scale(cfg.tv))?;
            }
            Ok(obj)
        })?;
        Ok((loss, single(grads.pop().expect("one input"))))
    };
    let clamp = cfg.clamp;
    let out = minimize(single(init_input(cfg, d)), cfg, objective, |p| {
        if clamp {
            p.map(|v| v.clamp(0.0, 1.0))
        } else {
            p
        }
    })?;
    Ok(Reconstruction {
        x: out.best.require(INPUT)?.clone(),
        loss: out.best_loss,
        trace: out.trace,
    })
}

/// Exact single-sample input from first-layer gradients.
///
/// For one sample `dL/dW = (dL/db) x^T`, so any row `i` with a usable bias
/// gradient gives `x = dW[i, :] / db[i]`. The row with the largest
/// `|db[i]|` is used.
pub fn analytic_input_recovery(dw: &Tensor, db: &Tensor) -> Result<Tensor> {
    let out = match dw.shape() {
        [o, _] => *o,
        s => return Err(dim_err!("weight gradient must be [out, in], got {s:?}")),
    };
    if db.shape() != [out] {
        return Err(dim_err!("bias gradient {:?} does not match {out} rows", db.shape()));
    }
    let (row, mag) = db
        .data()
        .iter()
        .enumerate()
        .map(|(i, b)| (i, b.abs()))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    if !(mag > BIAS_THRESHOLD) {
        return Err(Error::DegenerateGradient(format!(
            "largest bias gradient {mag:e} is below {BIAS_THRESHOLD:e}"
        )));
    }
    let b = db.data()[row];
    Ok(Tensor::from_vec(dw.row(row).iter().map(|w| w / b).collect()))
}

/// [`analytic_input_recovery`] on the first dense layer of a full-model
/// transcript.
pub fn analytic_from_transcript(t: &Transcript) -> Result<Tensor> {
    let (_, grads) = t.full_model()?;
    analytic_input_recovery(grads.require("dense0.weight")?, grads.require("dense0.bias")?)
}
