use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{GradNormSource, RoundConfig};
use crate::datakit::Dataset;
use crate::diffnet::graph::{Graph, Var};
use crate::diffnet::net::{leaf_params, loss_and_grad, loss_graph, Batch, ModelSpec, NetSpec};
use crate::diffnet::{sgd_step, OptimConfig, ParamSet, SgdState};
use crate::error::{Error, Result};
use crate::hypernet::{hypernet_forward, hypernet_graph, HypernetSpec};
use crate::tensor::Tensor;

/// Name under which the embedding travels through the optimizer.
pub const EMBEDDING: &str = "embedding";

#[derive(Debug, Clone, PartialEq)]
pub enum LocalModel {
    /// Private embedding and classifier plus the local hypernetwork.
    Hyperfl {
        v: Tensor,
        phi_h: ParamSet,
        phi_c: ParamSet,
        opt_h: SgdState,
        opt_v: SgdState,
        opt_c: SgdState,
    },
    /// A directly parameterized model.
    Full { params: ParamSet, opt: SgdState },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub model: LocalModel,
    /// Extractor and hypernetwork after the client's last training, for
    /// drift measurements.
    pub prev_extractor: Option<ParamSet>,
    pub prev_hypernet: Option<ParamSet>,
}

impl ClientState {
    /// The client's current full-model parameters.
    pub fn full_params(&self, hyper: &HypernetSpec) -> Result<ParamSet> {
        match &self.model {
            LocalModel::Hyperfl { v, phi_h, phi_c, .. } => hypernet_forward(v, phi_h, hyper)?.merge(phi_c),
            LocalModel::Full { params, .. } => Ok(params.clone()),
        }
    }

    pub fn extractor(&self, spec: &ModelSpec, hyper: &HypernetSpec) -> Result<ParamSet> {
        match &self.model {
            LocalModel::Hyperfl { v, phi_h, .. } => hypernet_forward(v, phi_h, hyper),
            LocalModel::Full { params, .. } => Ok(spec.split(params).0),
        }
    }

    pub fn hypernet(&self) -> Option<&ParamSet> {
        match &self.model {
            LocalModel::Hyperfl { phi_h, .. } => Some(phi_h),
            LocalModel::Full { .. } => None,
        }
    }
}

/// What one round of local training produced.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub upload: ParamSet,
    /// Mean minibatch loss over all steps of the round.
    pub mean_loss: f64,
    /// Mean over steps of the squared gradient norm over every parameter
    /// group, probed as configured by [`RoundConfig::grad_norm`].
    pub mean_grad_sq_norm: f64,
    pub steps: usize,
}

#[derive(Default)]
struct StepStats {
    loss: f64,
    grad_sq: f64,
    steps: usize,
}

impl StepStats {
    fn push(&mut self, loss: f64, grad_sq: f64) {
        self.loss += loss;
        self.grad_sq += grad_sq;
        self.steps += 1;
    }

    fn finish(self, upload: ParamSet) -> LocalOutcome {
        let n = self.steps.max(1) as f64;
        LocalOutcome {
            upload,
            mean_loss: self.loss / n,
            mean_grad_sq_norm: self.grad_sq / n,
            steps: self.steps,
        }
    }
}

/// Shuffled minibatches covering `n` samples once.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Loss of the generated model and its gradients with respect to the
/// hypernetwork, the embedding, and the classifier.
pub struct HyperGrads {
    pub loss: f64,
    pub phi_h: ParamSet,
    pub v: Tensor,
    pub phi_c: ParamSet,
}

impl HyperGrads {
    pub fn sq_norm(&self) -> f64 {
        self.phi_h.sq_norm() + self.v.sq_norm() + self.phi_c.sq_norm()
    }
}

pub fn hyperfl_grads(
    net: &NetSpec,
    hyper: &HypernetSpec,
    v: &Tensor,
    phi_h: &ParamSet,
    phi_c: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<HyperGrads> {
    let g = Graph::new();
    let ph = leaf_params(&g, phi_h);
    let vv = g.leaf(v.clone());
    let pc = leaf_params(&g, phi_c);
    let mut all = hypernet_graph(hyper, &ph, vv)?;
    for (k, var) in &pc {
        if all.insert(k.clone(), *var).is_some() {
            return Err(Error::Dimension(format!("`{k}` is both generated and local")));
        }
    }
    let loss = loss_graph(net, &all, g.constant(x.clone()), labels)?;
    let mut wrt: Vec<Var> = ph.values().copied().collect();
    wrt.push(vv);
    wrt.extend(pc.values().copied());
    let grads = g.grad(loss, &wrt)?;
    let val = |i: usize| (*grads[i].value()).clone();
    let nh = ph.len();
    let out = HyperGrads {
        loss: loss.value().item(),
        phi_h: ph.keys().enumerate().map(|(i, k)| (k.clone(), val(i))).collect(),
        v: val(nh),
        phi_c: pc.keys().enumerate().map(|(i, k)| (k.clone(), val(nh + 1 + i))).collect(),
    };
    if !out.loss.is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    Ok(out)
}

fn embedding_set(v: &Tensor) -> ParamSet {
    [(EMBEDDING.to_string(), v.clone())].into_iter().collect()
}

fn batch_of(ds: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    Ok((ds.x.select_rows(idx)?, idx.iter().map(|&i| ds.y[i]).collect()))
}

/// HyperFL local update: the hypernetwork is replaced by `phi_bar`, the
/// classifier is trained with the generated extractor frozen, then the
/// hypernetwork and embedding are trained with the classifier frozen. The
/// upload is the hypernetwork alone.
pub fn local_train_hyperfl(
    client: &mut ClientState,
    phi_bar: &ParamSet,
    spec: &ModelSpec,
    hyper: &HypernetSpec,
    cfg: &RoundConfig,
    rng: &mut impl Rng,
) -> Result<LocalOutcome> {
    if client.train.is_empty() {
        return Err(Error::Config(format!("client {} has no training data", client.id)));
    }
    let n = client.train.len();
    let LocalModel::Hyperfl {
        v,
        phi_h,
        phi_c,
        opt_h,
        opt_v,
        opt_c,
    } = &mut client.model
    else {
        return Err(Error::Capability("client does not hold a hypernetwork".into()));
    };
    hyper.check_params(phi_bar)?;
    *phi_h = phi_bar.clone();
    opt_h.reset();
    let mut stats = StepStats::default();

    for _ in 0..cfg.classifier_epochs {
        for idx in epoch_batches(n, cfg.batch_size, rng) {
            let (x, y) = batch_of(&client.train, &idx)?;
            let g = hyperfl_grads(&spec.net, hyper, v, phi_h, phi_c, &x, &y)?;
            let probe = match cfg.grad_norm {
                GradNormSource::Batch => g.sq_norm(),
                GradNormSource::Full => hyperfl_grads(&spec.net, hyper, v, phi_h, phi_c, &client.train.x, &client.train.y)?.sq_norm(),
            };
            stats.push(g.loss, probe);
            let (next, st) = sgd_step(phi_c, &g.phi_c, &cfg.eta_g, opt_c)?;
            *phi_c = next;
            *opt_c = st;
        }
    }
    for _ in 0..cfg.local_epochs {
        for idx in epoch_batches(n, cfg.batch_size, rng) {
            let (x, y) = batch_of(&client.train, &idx)?;
            let g = hyperfl_grads(&spec.net, hyper, v, phi_h, phi_c, &x, &y)?;
            let probe = match cfg.grad_norm {
                GradNormSource::Batch => g.sq_norm(),
                GradNormSource::Full => hyperfl_grads(&spec.net, hyper, v, phi_h, phi_c, &client.train.x, &client.train.y)?.sq_norm(),
            };
            stats.push(g.loss, probe);
            let (next, st) = sgd_step(phi_h, &g.phi_h, &cfg.eta_h, opt_h)?;
            *phi_h = next;
            *opt_h = st;
            let (next, st) = sgd_step(&embedding_set(v), &embedding_set(&g.v), &cfg.eta_v, opt_v)?;
            *v = next.require(EMBEDDING)?.clone();
            *opt_v = st;
        }
    }
    Ok(stats.finish(phi_h.clone()))
}

/// Plain minibatch SGD on a full model for `epochs` epochs; returns the
/// trained parameters as the upload.
pub fn local_train_full(
    params: &mut ParamSet,
    opt: &mut SgdState,
    net: &NetSpec,
    train: &Dataset,
    optim: &OptimConfig,
    epochs: usize,
    batch_size: usize,
    grad_norm: GradNormSource,
    rng: &mut impl Rng,
) -> Result<LocalOutcome> {
    if train.is_empty() {
        return Err(Error::Config("client has no training data".into()));
    }
    let mut stats = StepStats::default();
    for _ in 0..epochs {
        for idx in epoch_batches(train.len(), batch_size, rng) {
            let (x, y) = batch_of(train, &idx)?;
            let (loss, grads) = loss_and_grad(params, net, Batch::new(&x, &y))?;
            if !loss.is_finite() {
                return Err(Error::Numeric("training loss is not finite".into()));
            }
            let probe = match grad_norm {
                GradNormSource::Batch => grads.sq_norm(),
                GradNormSource::Full => loss_and_grad(params, net, Batch::new(&train.x, &train.y))?.1.sq_norm(),
            };
            stats.push(loss, probe);
            let (next, st) = sgd_step(params, &grads, optim, opt)?;
            *params = next;
            *opt = st;
        }
    }
    Ok(stats.finish(params.clone()))
}

/// FedAvg local update: start from `global` with a fresh optimizer.
pub fn local_train_fedavg(
    client: &mut ClientState,
    global: &ParamSet,
    net: &NetSpec,
    cfg: &RoundConfig,
    rng: &mut impl Rng,
) -> Result<LocalOutcome> {
    let LocalModel::Full { params, opt } = &mut client.model else {
        return Err(Error::Capability("client does not hold a full model".into()));
    };
    net.check_params(global)?;
    *params = global.clone();
    opt.reset();
    local_train_full(
        params,
        opt,
        net,
        &client.train,
        &cfg.eta_g,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.grad_norm,
        rng,
    )
}
