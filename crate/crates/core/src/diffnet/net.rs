//! Fully connected classifiers and their loss/gradient entry points.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Dense { input: usize, output: usize },
    Relu,
    LeakyRelu,
    /// Softmax cross-entropy head; only valid as the last layer.
    SoftmaxXent,
}

/// Shape and name of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    /// Input width of the dense layer owning this tensor.
    pub fan_in: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub layers: Vec<Layer>,
}

impl NetSpec {
    /// `dims[0] -> dims[1] -> ... -> dims[n]` with the given activation
    /// between dense layers and a softmax cross-entropy head.
    pub fn mlp(dims: &[usize], activation: Layer) -> Self {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Layer::Dense {
                input: w[0],
                output: w[1],
            });
            if i + 2 < dims.len() {
                layers.push(activation);
            }
        }
        layers.push(Layer::SoftmaxXent);
        Self { layers }
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim: Option<usize> = None;
        let mut dense = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { input, output } => {
                    if input == 0 || output == 0 {
                        return Err(dim_err!("layer {i}: dense dims must be positive"));
                    }
                    if let Some(d) = dim {
                        if d != input {
                            return Err(dim_err!(
                                "layer {i}: expects input {input} but previous layer gives {d}"
                            ));
                        }
                    }
                    dim = Some(output);
                    dense += 1;
                }
                Layer::SoftmaxXent if i + 1 != self.layers.len() => {
                    return Err(dim_err!("layer {i}: softmax head must be last"));
                }
                _ => {}
            }
        }
        if dense == 0 {
            return Err(dim_err!("network needs at least one dense layer"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense { input, .. } => Some(*input),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { output, .. } => Some(*output),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn has_head(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::SoftmaxXent))
    }

    /// Parameter tensors in layer order: `dense{k}.weight` is `[out, in]`,
    /// `dense{k}.bias` is `[out]`, `k` counting dense layers only.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        self.param_shapes_for(0..self.layers.len())
    }

    fn param_shapes_for(&self, range: std::ops::Range<usize>) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut k = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Dense { input, output } = *layer {
                if range.contains(&i) {
                    out.push(ParamShape {
                        name: format!("dense{k}.weight"),
                        shape: vec![output, input],
                        fan_in: input,
                    });
                    out.push(ParamShape {
                        name: format!("dense{k}.bias"),
                        shape: vec![output],
                        fan_in: input,
                    });
                }
                k += 1;
            }
        }
        out
    }

    /// Uniform in `±1/sqrt(fan_in)` per dense layer.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        init_uniform(&self.param_shapes(), rng)
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(dim_err!(
                "network expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            ));
        }
        for s in &shapes {
            let t = params.require(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(dim_err!(
                    "`{}` should be {:?}, got {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                ));
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_uniform(shapes: &[ParamShape], rng: &mut impl Rng) -> ParamSet {
    shapes
        .iter()
        .map(|s| {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            let n: usize = s.shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            (s.name.clone(), Tensor::new(s.shape.clone(), data).expect("shape"))
        })
        .collect()
}

/// A classifier split into a feature extractor (the first
/// `extractor_layers` layers) and a classification head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub net: NetSpec,
    pub extractor_layers: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !self.net.has_head() {
            return Err(dim_err!("model must end with a softmax_xent head"));
        }
        if self.extractor_layers == 0 || self.extractor_layers >= self.net.layers.len() {
            return Err(dim_err!(
                "extractor_layers must be in 1..{}",
                self.net.layers.len()
            ));
        }
        if self.extractor_shapes().is_empty() || self.classifier_shapes().is_empty() {
            return Err(dim_err!("extractor and classifier each need a dense layer"));
        }
        Ok(())
    }

    pub fn extractor_shapes(&self) -> Vec<ParamShape> {
        self.net.param_shapes_for(0..self.extractor_layers)
    }

    pub fn classifier_shapes(&self) -> Vec<ParamShape> {
        self.net
            .param_shapes_for(self.extractor_layers..self.net.layers.len())
    }

    /// Splits full-model parameters into (extractor, classifier).
    pub fn split(&self, full: &ParamSet) -> (ParamSet, ParamSet) {
        let names: Vec<String> = self.extractor_shapes().into_iter().map(|s| s.name).collect();
        full.partition(|n| names.iter().any(|m| m == n))
    }
}

/// A minibatch: `x` is `[batch, features]`, `labels` holds class indices.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a Tensor, labels: &'a [usize]) -> Self {
        Self { x, labels }
    }

    fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.x.shape().len() != 2 || self.x.shape()[1] != spec.input_dim() {
            return Err(dim_err!(
                "batch {:?} does not match network input {}",
                self.x.shape(),
                spec.input_dim()
            ));
        }
        if self.labels.len() != self.x.shape()[0] {
            return Err(dim_err!(
                "{} labels for {} samples",
                self.labels.len(),
                self.x.shape()[0]
            ));
        }
        let k = spec.output_dim();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(dim_err!("label {bad} out of range for {k} classes"));
        }
        self.x.check_finite("batch input")
    }
}

pub type VarParams<'g> = BTreeMap<String, Var<'g>>;

pub fn leaf_params<'g>(g: &'g Graph, params: &ParamSet) -> VarParams<'g> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
        .collect()
}

/// Runs every layer except the loss head; returns `[batch, out]`.
pub fn logits_graph<'g>(spec: &NetSpec, params: &VarParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let mut h = x;
    let mut k = 0;
    for layer in &spec.layers {
        h = match layer {
            Layer::Dense { .. } => {
                let w = lookup(params, &format!("dense{k}.weight"))?;
                let b = lookup(params, &format!("dense{k}.bias"))?;
                k += 1;
                h.matmul(w.transpose()?)?.add_bias(b)?
            }
            Layer::Relu => h.relu()?,
            Layer::LeakyRelu => h.leaky_relu(LEAKY_SLOPE)?,
            Layer::SoftmaxXent => h,
        };
    }
    Ok(h)
}

fn lookup<'g>(params: &VarParams<'g>, name: &str) -> Result<Var<'g>> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| dim_err!("missing parameter tensor `{name}`"))
}

/// Mean softmax cross-entropy of `logits` against class indices.
pub fn xent_graph<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let value = logits.value();
    let (m, k) = (value.shape()[0], value.shape()[1]);
    let mut onehot = vec![0.0; m * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let onehot = Rc::new(Tensor::new(vec![m, k], onehot)?);
    let picked = logits.mul_const(onehot)?.sum_cols()?;
    Ok(logits.logsumexp()?.sub(picked)?.sum_all().scale(1.0 / m as f64))
}

pub fn loss_graph<'g>(
    spec: &NetSpec,
    params: &VarParams<'g>,
    x: Var<'g>,
    labels: &[usize],
) -> Result<Var<'g>> {
    xent_graph(logits_graph(spec, params, x)?, labels)
}

fn check_all(params: &ParamSet, spec: &NetSpec, batch: Batch<'_>) -> Result<()> {
    spec.validate()?;
    if !spec.has_head() {
        return Err(dim_err!("loss needs a softmax_xent head"));
    }
    spec.check_params(params)?;
    batch.check(spec)
}

/// Mean cross-entropy of the network on `batch`.
pub fn forward_loss(params: &ParamSet, spec: &NetSpec, batch: Batch<'_>) -> Result<f64> {
    check_all(params, spec, batch)?;
    let g = Graph::new();
    let p = leaf_params(&g, params);
    let x = g.constant(batch.x.clone());
    Ok(loss_graph(spec, &p, x, batch.labels)?.value().item())
}

/// Network outputs before the loss head, `[batch, classes]`.
pub fn logits(params: &ParamSet, spec: &NetSpec, x: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    spec.check_params(params)?;
    if x.shape().len() != 2 || x.cols() != spec.input_dim() {
        return Err(dim_err!(
            "input {:?} does not match network input {}",
            x.shape(),
            spec.input_dim()
        ));
    }
    let g = Graph::new();
    let p = leaf_params(&g, params);
    let out = logits_graph(spec, &p, g.constant(x.clone()))?;
    Ok((*out.value()).clone())
}

/// Loss and its gradient with respect to every parameter tensor.
pub fn loss_and_grad(params: &ParamSet, spec: &NetSpec, batch: Batch<'_>) -> Result<(f64, ParamSet)> {
    check_all(params, spec, batch)?;
    let g = Graph::new();
    let p = leaf_params(&g, params);
    let x = g.constant(batch.x.clone());
    let loss = loss_graph(spec, &p, x, batch.labels)?;
    let wrt: Vec<Var> = p.values().copied().collect();
    let grads = g.grad(loss, &wrt)?;
    let out = p
        .keys()
        .zip(grads)
        .map(|(k, v)| (k.clone(), (*v.value()).clone()))
        .collect();
    Ok((loss.value().item(), out))
}

pub fn grad_params(params: &ParamSet, spec: &NetSpec, batch: Batch<'_>) -> Result<ParamSet> {
    Ok(loss_and_grad(params, spec, batch)?.1)
}

/// Gradient of the loss with respect to the input batch.
pub fn grad_input(params: &ParamSet, spec: &NetSpec, batch: Batch<'_>) -> Result<Tensor> {
    check_all(params, spec, batch)?;
    let g = Graph::new();
    let p = leaf_params(&g, params);
    let x = g.leaf(batch.x.clone());
    let loss = loss_graph(spec, &p, x, batch.labels)?;
    Ok((*g.grad(loss, &[x])?[0].value()).clone())
}

/// Differentiates a scalar objective whose body may itself take gradients.
///
/// `objective` receives the graph and one leaf per entry of `inputs`; it
/// may call [`Graph::grad`] internally (for example to form a
/// gradient-matching loss). Returns the objective value and its exact
/// gradient with respect to each input, including the second-order terms.
pub fn nested_grad<F>(inputs: &[Tensor], objective: F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'g> FnOnce(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = objective(&g, &leaves)?;
    let value = out.value();
    if value.len() != 1 {
        return Err(dim_err!("objective must be scalar, got {:?}", value.shape()));
    }
    if !value.item().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let grads = g.grad(out, &leaves)?;
    Ok((
        value.item(),
        grads.into_iter().map(|v| (*v.value()).clone()).collect(),
    ))
}

/// Parameter gradients of the loss as graph values, for use inside a
/// [`nested_grad`] objective.
pub fn grad_params_graph<'g>(
    g: &'g Graph,
    spec: &NetSpec,
    params: &VarParams<'g>,
    x: Var<'g>,
    labels: &[usize],
) -> Result<VarParams<'g>> {
    let loss = loss_graph(spec, params, x, labels)?;
    let wrt: Vec<Var> = params.values().copied().collect();
    let grads = g.grad(loss, &wrt)?;
    Ok(params.keys().cloned().zip(grads).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> NetSpec {
        NetSpec::mlp(&[4, 5, 3], Layer::LeakyRelu)
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> (Tensor, Vec<usize>) {
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|i| i % k).collect();
        (x, y)
    }

    #[test]
    fn zero_net_gives_log_k() {
        let spec = NetSpec::mlp(&[6, 10], Layer::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = spec.init_params(&mut rng).map(|_| 0.0);
        let (x, y) = batch(&mut rng, 7, 6, 10);
        let l = forward_loss(&params, &spec, Batch::new(&x, &y)).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_margin_drives_gradient_to_zero() {
        let spec = NetSpec::mlp(&[1, 2], Layer::Relu);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut p = ParamSet::new();
            p.insert("dense0.weight", Tensor::new(vec![2, 1], vec![margin, -margin]).unwrap());
            p.insert("dense0.bias", Tensor::zeros(&[2]));
            let g = grad_params(&p, &spec, Batch::new(&x, &[0])).unwrap();
            assert!(g.norm() < prev);
            prev = g.norm();
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn shape_and_numeric_errors() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = spec.init_params(&mut rng);
        let (x, y) = batch(&mut rng, 3, 5, 3);
        assert!(matches!(
            forward_loss(&params, &spec, Batch::new(&x, &y)),
            Err(Error::Dimension(_))
        ));
        let (x, y) = batch(&mut rng, 3, 4, 3);
        params.get_mut("dense1.bias").unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(
            forward_loss(&params, &spec, Batch::new(&x, &y)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn constant_network_has_zero_input_gradient() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = spec.init_params(&mut rng).map(|_| 0.0);
        let (x, y) = batch(&mut rng, 2, 4, 3);
        let gx = grad_input(&params, &spec, Batch::new(&x, &y)).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nested_grad_without_inner_grad_equals_grad_input() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = spec.init_params(&mut rng);
        let (x, y) = batch(&mut rng, 3, 4, 3);
        let direct = grad_input(&params, &spec, Batch::new(&x, &y)).unwrap();
        let (_, nested) = nested_grad(&[x.clone()], |g, v| {
            let p = leaf_params(g, &params);
            loss_graph(&spec, &p, v[0], &y)
        })
        .unwrap();
        assert_eq!(direct, nested[0]);
    }

    #[test]
    fn validate_rejects_broken_chains() {
        let bad = NetSpec {
            layers: vec![
                Layer::Dense { input: 3, output: 4 },
                Layer::Dense { input: 5, output: 2 },
            ],
        };
        assert!(bad.validate().is_err());
        assert!(NetSpec { layers: vec![Layer::Relu] }.validate().is_err());
        let head_first = NetSpec {
            layers: vec![Layer::SoftmaxXent, Layer::Dense { input: 1, output: 2 }],
        };
        assert!(head_first.validate().is_err());
    }
}
