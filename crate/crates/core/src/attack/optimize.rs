//! Pieces shared by every attack: the gradient-matching loss, the
//! smoothness prior, and the iterate loop with best-iterate tracking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AttackConfig, GradLoss, InitKind, Optimizer};
use crate::diffnet::graph::{Graph, Var};
use crate::diffnet::net::VarParams;
use crate::diffnet::{adam_step, AdamState, ParamSet};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

// keeps the cosine loss differentiable at a zero gradient
const NORM_FLOOR: f64 = 1e-30;

/// Anisotropic total variation of an `[H, W]` image:
/// `sum |x[i+1,j] - x[i,j]| + sum |x[i,j+1] - x[i,j]|`.
pub fn total_variation(x: &Tensor) -> Result<f64> {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        s => return Err(dim_err!("total variation expects an [H, W] image, got {s:?}")),
    };
    let d = x.data();
    let mut tv = 0.0;
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                tv += (d[(i + 1) * w + j] - d[i * w + j]).abs();
            }
            if j + 1 < w {
                tv += (d[i * w + j + 1] - d[i * w + j]).abs();
            }
        }
    }
    Ok(tv)
}

fn difference_matrix(n: usize) -> Tensor {
    // [n-1, n], row i = e_{i+1} - e_i
    let mut d = vec![0.0; (n - 1) * n];
    for i in 0..n - 1 {
        d[i * n + i] = -1.0;
        d[i * n + i + 1] = 1.0;
    }
    Tensor::new(vec![n - 1, n], d).expect("shape")
}

/// [`total_variation`] on the graph; `x` holds `rows * cols` entries.
pub fn tv_graph<'g>(g: &'g Graph, x: Var<'g>, rows: usize, cols: usize) -> Result<Var<'g>> {
    let img = x.reshape(&[rows, cols])?;
    let mut acc = g.constant(Tensor::scalar(0.0));
    if rows > 1 {
        let dv = g.constant(difference_matrix(rows));
        acc = acc.add(dv.matmul(img)?.abs()?.sum_all())?;
    }
    if cols > 1 {
        let dh = g.constant(difference_matrix(cols).transpose()?);
        acc = acc.add(img.matmul(dh)?.abs()?.sum_all())?;
    }
    Ok(acc)
}

/// Distance between predicted gradients and the observed `target`, over
/// every tensor of `target`.
pub fn match_loss_graph<'g>(
    g: &'g Graph,
    kind: GradLoss,
    pred: &VarParams<'g>,
    target: &ParamSet,
) -> Result<Var<'g>> {
    let mut terms = Vec::with_capacity(target.len());
    for (name, t) in target.iter() {
        let p = pred
            .get(name)
            .copied()
            .ok_or_else(|| dim_err!("no predicted gradient for `{name}`"))?;
        terms.push((p, g.constant(t.clone())));
    }
    let sum = |vals: Vec<Var<'g>>| -> Result<Var<'g>> {
        let mut it = vals.into_iter();
        let first = it.next().ok_or_else(|| dim_err!("empty gradient set"))?;
        it.try_fold(first, |a, b| a.add(b))
    };
    match kind {
        GradLoss::SquaredL2 => {
            let parts = terms
                .iter()
                .map(|&(p, t)| p.sub(t)?.sq_norm())
                .collect::<Result<Vec<_>>>()?;
            sum(parts)
        }
        GradLoss::Cosine => {
            let tn = target.norm();
            if tn == 0.0 {
                return Err(Error::DegenerateGradient("observed gradient is zero".into()));
            }
            let dots = terms.iter().map(|&(p, t)| p.dot(t)).collect::<Result<Vec<_>>>()?;
            let sq = terms.iter().map(|&(p, _)| p.sq_norm()).collect::<Result<Vec<_>>>()?;
            let pn = sum(sq)?.add(g.constant(Tensor::scalar(NORM_FLOOR)))?.sqrt()?;
            let cos = sum(dots)?.mul(pn.recip()?)?.scale(1.0 / tn);
            Ok(g.constant(Tensor::scalar(1.0)).sub(cos)?)
        }
    }
}

/// Initial reconstruction of `n` entries.
pub fn init_input(cfg: &AttackConfig, n: usize) -> Tensor {
    match cfg.init {
        InitKind::Zeros => Tensor::zeros(&[n]),
        InitKind::SeededUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Tensor::from_vec((0..n).map(|_| rng.gen::<f64>()).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
    /// Lowest loss seen up to and including this iteration.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub best: ParamSet,
    pub best_loss: f64,
    pub trace: Vec<TracePoint>,
}

/// Runs `cfg.iterations` optimizer steps on `init`, evaluating the
/// objective once per iterate (including the last), and returns the
/// iterate with the lowest objective. `project` is applied after each step.
pub fn minimize(
    init: ParamSet,
    cfg: &AttackConfig,
    mut objective: impl FnMut(&ParamSet) -> Result<(f64, ParamSet)>,
    project: impl Fn(ParamSet) -> ParamSet,
) -> Result<Minimized> {
    cfg.validate()?;
    let n = cfg.iterations;
    let mut x = init;
    let mut best = (f64::INFINITY, x.clone());
    let mut trace = Vec::new();
    let mut adam = AdamState::default();
    for it in 0..=n {
        let (loss, grad) = objective(&x)?;
        if loss < best.0 || it == 0 {
            best = (loss, x.clone());
        }
        if it % cfg.trace_every == 0 || it == n {
            trace.push(TracePoint {
                iteration: it,
                loss,
                best: best.0,
            });
        }
        if it == n {
            break;
        }
        if !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite attack gradient at iteration {it}")));
        }
        let lr = cfg.step_at(it);
        x = match cfg.optimizer {
            Optimizer::Adam => adam_step(&x, &grad, lr, &mut adam)?,
            Optimizer::Sgd => x.zip_map(&grad, |p, g| p - lr * g)?,
        };
        x = project(x);
    }
    Ok(Minimized {
        best: best.1,
        best_loss: best.0,
        trace,
    })
}
