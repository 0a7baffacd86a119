//! Client-side hypernetwork: a private embedding goes through one hidden
//! layer, then one linear head per target tensor emits that tensor's
//! entries.
//!
//! Parameter names:
//!
//! - `hidden.weight` `[hidden, d]`, `hidden.bias` `[hidden]` (optional)
//! - `head.<target>.weight` `[numel(target), hidden]`
//! - `head.<target>.bias` `[numel(target)]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::graph::{Graph, Var};
use crate::diffnet::net::{leaf_params, ParamShape, VarParams};
use crate::diffnet::ParamSet;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// One tensor the hypernetwork must generate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TargetTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl TargetTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl From<ParamShape> for TargetTensor {
    fn from(s: ParamShape) -> Self {
        Self {
            name: s.name,
            shape: s.shape,
            fan_in: s.fan_in,
        }
    }
}

pub type TargetSpec = Vec<TargetTensor>;

pub fn target_from_shapes(shapes: Vec<ParamShape>) -> TargetSpec {
    shapes.into_iter().map(TargetTensor::from).collect()
}

fn default_embedding_dim() -> usize {
    64
}

fn default_hidden_dim() -> usize {
    100
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct HypernetSpec {
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_true")]
    pub hidden_bias: bool,
    /// Filled from the model's feature extractor when left empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target: TargetSpec,
}

impl Default for HypernetSpec {
    fn default() -> Self {
        Self {
            embedding_dim: default_embedding_dim(),
            hidden_dim: default_hidden_dim(),
            hidden_bias: true,
            target: Vec::new(),
        }
    }
}

impl HypernetSpec {
    pub fn with_target(mut self, target: TargetSpec) -> Self {
        self.target = target;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(dim_err!("hypernetwork dims must be positive"));
        }
        if self.target.is_empty() {
            return Err(dim_err!("hypernetwork has no target tensors"));
        }
        for (i, t) in self.target.iter().enumerate() {
            if t.shape.is_empty() || t.numel() == 0 {
                return Err(dim_err!("target `{}` has an empty shape", t.name));
            }
            if self.target[..i].iter().any(|o| o.name == t.name) {
                return Err(dim_err!("duplicate target `{}`", t.name));
            }
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(
            "hidden.weight".to_string(),
            vec![self.hidden_dim, self.embedding_dim],
        )];
        if self.hidden_bias {
            out.push(("hidden.bias".to_string(), vec![self.hidden_dim]));
        }
        for t in &self.target {
            out.push((format!("head.{}.weight", t.name), vec![t.numel(), self.hidden_dim]));
            out.push((format!("head.{}.bias", t.name), vec![t.numel()]));
        }
        out
    }

    pub fn check_params(&self, phi: &ParamSet) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != phi.len() {
            return Err(dim_err!(
                "hypernetwork expects {} tensors, got {}",
                shapes.len(),
                phi.len()
            ));
        }
        for (name, shape) in &shapes {
            let t = phi.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(dim_err!("`{name}` should be {shape:?}, got {:?}", t.shape()));
            }
        }
        Ok(())
    }

    fn check_embedding(&self, v: &Tensor) -> Result<()> {
        if v.shape() != [self.embedding_dim] {
            return Err(dim_err!(
                "embedding should be [{}], got {:?}",
                self.embedding_dim,
                v.shape()
            ));
        }
        v.check_finite("embedding")
    }

    fn check_target(&self, theta: &ParamSet) -> Result<()> {
        if theta.len() != self.target.len() {
            return Err(dim_err!(
                "expected {} target tensors, got {}",
                self.target.len(),
                theta.len()
            ));
        }
        for t in &self.target {
            let x = theta.require(&t.name)?;
            if x.shape() != t.shape.as_slice() {
                return Err(dim_err!("`{}` should be {:?}, got {:?}", t.name, t.shape, x.shape()));
            }
        }
        Ok(())
    }
}

/// Records the hypernetwork on `g`; returns one graph value per target.
pub fn hypernet_graph<'g>(spec: &HypernetSpec, phi: &VarParams<'g>, v: Var<'g>) -> Result<VarParams<'g>> {
    let get = |n: &str| {
        phi.get(n)
            .copied()
            .ok_or_else(|| dim_err!("missing hypernetwork tensor `{n}`"))
    };
    let row = v.reshape(&[1, spec.embedding_dim])?;
    let mut pre = row.matmul(get("hidden.weight")?.transpose()?)?;
    if spec.hidden_bias {
        pre = pre.add_bias(get("hidden.bias")?)?;
    }
    let hidden = pre.relu()?;
    let mut out = VarParams::new();
    for t in &spec.target {
        let w = get(&format!("head.{}.weight", t.name))?;
        let b = get(&format!("head.{}.bias", t.name))?;
        let flat = hidden.matmul(w.transpose()?)?.add_bias(b)?;
        out.insert(t.name.clone(), flat.reshape(&t.shape)?);
    }
    Ok(out)
}

/// Generates the target parameters `θ = h(v; φ)`.
pub fn hypernet_forward(v: &Tensor, phi: &ParamSet, spec: &HypernetSpec) -> Result<ParamSet> {
    spec.validate()?;
    spec.check_params(phi)?;
    spec.check_embedding(v)?;
    let g = Graph::new();
    let p = leaf_params(&g, phi);
    let theta = hypernet_graph(spec, &p, g.leaf(v.clone()))?;
    Ok(theta
        .into_iter()
        .map(|(k, var)| (k, (*var.value()).clone()))
        .collect())
}

/// Vector-Jacobian product of [`hypernet_forward`]: given a cotangent on
/// `θ`, returns the cotangents on `φ` and on `v`.
pub fn hypernet_backward(
    d_theta: &ParamSet,
    v: &Tensor,
    phi: &ParamSet,
    spec: &HypernetSpec,
) -> Result<(ParamSet, Tensor)> {
    spec.validate()?;
    spec.check_params(phi)?;
    spec.check_embedding(v)?;
    spec.check_target(d_theta)?;
    let g = Graph::new();
    let p = leaf_params(&g, phi);
    let vv = g.leaf(v.clone());
    let theta = hypernet_graph(spec, &p, vv)?;
    let s = contract(&g, &theta, d_theta)?;
    let mut wrt: Vec<Var> = p.values().copied().collect();
    wrt.push(vv);
    let mut grads = g.grad(s, &wrt)?;
    let dv = (*grads.pop().expect("dv").value()).clone();
    let dphi = p
        .keys()
        .zip(grads)
        .map(|(k, var)| (k.clone(), (*var.value()).clone()))
        .collect();
    Ok((dphi, dv))
}

/// `Σ_k <θ_k, c_k>` as a graph scalar, with `c` held constant.
fn contract<'g>(g: &'g Graph, theta: &VarParams<'g>, c: &ParamSet) -> Result<Var<'g>> {
    let mut acc: Option<Var> = None;
    for (name, t) in theta {
        let term = t.dot(g.constant(c.require(name)?.clone()))?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    acc.ok_or_else(|| dim_err!("empty target"))
}

/// Hypernetwork-parameter gradient implied by a `θ` cotangent, kept on the
/// graph so it can be differentiated with respect to `v` and the cotangent.
pub fn vjp_graph<'g>(
    g: &'g Graph,
    spec: &HypernetSpec,
    phi: &ParamSet,
    v: Var<'g>,
    cot: &VarParams<'g>,
) -> Result<VarParams<'g>> {
    let p = leaf_params(g, phi);
    let theta = hypernet_graph(spec, &p, v)?;
    let mut acc: Option<Var> = None;
    for (name, t) in &theta {
        let c = cot
            .get(name)
            .copied()
            .ok_or_else(|| dim_err!("missing cotangent for `{name}`"))?;
        let term = t.dot(c)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    let s = acc.ok_or_else(|| dim_err!("empty target"))?;
    let wrt: Vec<Var> = p.values().copied().collect();
    let grads = g.grad(s, &wrt)?;
    Ok(p.keys().cloned().zip(grads).collect())
}

/// Seeded initial hypernetwork and the embedding every client starts from.
///
/// Head weights are uniform in `±1/sqrt(hidden)` scaled by
/// `1/sqrt(fan_in)` of the tensor they generate; head biases start at zero.
pub fn init_hypernet(spec: &HypernetSpec, seed: u64) -> Result<(ParamSet, Tensor)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x4859_5045_524e);
    let d = spec.embedding_dim;
    let mut phi = ParamSet::new();
    let b_in = 1.0 / (d as f64).sqrt();
    phi.insert(
        "hidden.weight",
        uniform(&mut rng, vec![spec.hidden_dim, d], b_in),
    );
    if spec.hidden_bias {
        phi.insert("hidden.bias", uniform(&mut rng, vec![spec.hidden_dim], b_in));
    }
    let b_head = 1.0 / (spec.hidden_dim as f64).sqrt();
    for t in &spec.target {
        let bound = b_head / (t.fan_in.max(1) as f64).sqrt();
        phi.insert(
            format!("head.{}.weight", t.name),
            uniform(&mut rng, vec![t.numel(), spec.hidden_dim], bound),
        );
        phi.insert(format!("head.{}.bias", t.name), Tensor::zeros(&[t.numel()]));
    }
    let v = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok((phi, Tensor::from_vec(v)))
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Checks that a generated `θ` loads into a network whose extractor
/// tensors are `shapes`.
pub fn check_closure(theta: &ParamSet, shapes: &[ParamShape]) -> Result<()> {
    if theta.len() != shapes.len() {
        return Err(Error::Dimension(format!(
            "generated {} tensors for {} slots",
            theta.len(),
            shapes.len()
        )));
    }
    for s in shapes {
        if theta.require(&s.name)?.shape() != s.shape.as_slice() {
            return Err(dim_err!("generated `{}` has the wrong shape", s.name));
        }
    }
    Ok(())
}
