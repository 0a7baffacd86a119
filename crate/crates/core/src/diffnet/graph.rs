//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation is evaluated eagerly and recorded on a [`Graph`]. The
//! backward pass in [`Graph::grad`] does not produce plain tensors: each
//! vector-Jacobian product is itself built from recorded operations, so the
//! returned gradients are ordinary [`Var`]s that can be fed into further
//! computation and differentiated again. This is what lets a
//! gradient-matching loss (a function of `grad_params`) be differentiated
//! with respect to the input batch.
//!
//! Piecewise-linear activations are recorded as multiplication by a constant
//! mask, so their second derivative is zero, matching the analytic one
//! almost everywhere.
//!
//! ```
//! use hyperfl::diffnet::graph::Graph;
//! use hyperfl::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap(); // x²
//! let dy = g.grad(y, &[x]).unwrap()[0]; // 2x, still on the graph
//! let d2y = g.grad(dy, &[x]).unwrap()[0]; // 2
//! assert_eq!(dy.value().item(), 6.0);
//! assert_eq!(d2y.value().item(), 2.0);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Backward rule for an [`Graph::opaque`] node: `(input value, output
/// cotangent) -> input cotangent`.
pub type OpaqueVjp = Rc<dyn Fn(&Tensor, &Tensor) -> Result<Tensor>>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Rc<Tensor>),
    AddBias(usize, usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    SumAll(usize),
    Expand(usize),
    Reshape(usize),
    Softmax(usize),
    LogSumExp(usize),
    Sqrt(usize),
    Recip(usize),
    Opaque(usize, OpaqueVjp),
    /// Output of an opaque backward rule; it has no derivative of its own.
    OpaqueGrad(usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | OpaqueGrad(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | Scale(a, _)
            | MulConst(a, _)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | SumAll(a)
            | Expand(a)
            | Reshape(a)
            | Softmax(a)
            | LogSumExp(a)
            | Sqrt(a)
            | Recip(a)
            | Opaque(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// An append-only record of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(dim_err!("{what} expects a matrix, got {s:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input. Leaves and constants are the same thing: anything
    /// can be differentiated against by passing it to [`Graph::grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Records a node with a caller-supplied first-order backward rule.
    ///
    /// Gradients flow through it once. Differentiating a gradient that
    /// passed through an opaque node fails with a capability error.
    pub fn opaque<'g>(&'g self, input: Var<'g>, value: Tensor, vjp: OpaqueVjp) -> Var<'g> {
        self.push(value, Op::Opaque(input.id, vjp))
    }

    /// Gradient of the one-element `output` with respect to each of `wrt`.
    ///
    /// The results live on this graph and can be differentiated again.
    /// Inputs that `output` does not depend on get a zero gradient.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let out = output.id;
        let out_value = self.value_of(out);
        if out_value.len() != 1 {
            return Err(dim_err!(
                "grad needs a one-element output, got {:?}",
                out_value.shape()
            ));
        }
        let Some(start) = wrt.iter().map(|w| w.id).min() else {
            return Ok(vec![]);
        };

        let mut depends = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                depends[w.id] = true;
            }
        }
        for i in start..=out {
            if !depends[i] {
                depends[i] = self.op_of(i).parents().iter().any(|&p| depends[p]);
            }
        }

        let mut cot: Vec<Option<usize>> = vec![None; out + 1];
        if depends[out] {
            cot[out] = Some(self.constant(Tensor::full(out_value.shape(), 1.0)).id);
        }
        for i in (start..=out).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = cot[i] else { continue };
            for (parent, contrib) in self.vjp(i, self.var(g), &depends)? {
                cot[parent] = Some(match cot[parent] {
                    None => contrib.id,
                    Some(prev) => self.var(prev).add(contrib)?.id,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match cot.get(w.id).copied().flatten() {
                Some(id) => self.var(id),
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    fn vjp<'g>(&'g self, id: usize, g: Var<'g>, depends: &[bool]) -> Result<Vec<(usize, Var<'g>)>> {
        use Op::*;
        let want = |p: usize| depends[p];
        let me = self.var(id);
        let mut out = Vec::with_capacity(2);
        match self.op_of(id) {
            Leaf => {}
            MatMul(a, b) => {
                if want(a) {
                    out.push((a, g.matmul(self.var(b).transpose()?)?));
                }
                if want(b) {
                    out.push((b, self.var(a).transpose()?.matmul(g)?));
                }
            }
            Transpose(a) => out.push((a, g.transpose()?)),
            Add(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g.scale(-1.0)));
                }
            }
            Mul(a, b) => {
                if want(a) {
                    out.push((a, g.mul(self.var(b))?));
                }
                if want(b) {
                    out.push((b, g.mul(self.var(a))?));
                }
            }
            Scale(a, c) => out.push((a, g.scale(c))),
            MulConst(a, mask) => out.push((a, g.mul_const(mask)?)),
            AddBias(x, b) => {
                if want(x) {
                    out.push((x, g));
                }
                if want(b) {
                    out.push((b, g.sum_rows()?));
                }
            }
            SumRows(x) => {
                let m = self.value_of(x).shape()[0];
                out.push((x, g.broadcast_rows(m)?));
            }
            SumCols(x) => {
                let n = self.value_of(x).shape()[1];
                out.push((x, g.broadcast_cols(n)?));
            }
            BroadcastRows(v) => out.push((v, g.sum_rows()?)),
            BroadcastCols(v) => out.push((v, g.sum_cols()?)),
            SumAll(x) => {
                let shape = self.value_of(x).shape().to_vec();
                out.push((x, g.expand(&shape)?));
            }
            Expand(s) => out.push((s, g.sum_all())),
            Reshape(x) => {
                let shape = self.value_of(x).shape().to_vec();
                out.push((x, g.reshape(&shape)?));
            }
            Softmax(x) => {
                let n = self.value_of(x).shape()[1];
                let inner = g.mul(me)?.sum_cols()?.broadcast_cols(n)?;
                out.push((x, me.mul(g.sub(inner)?)?));
            }
            LogSumExp(x) => {
                let xv = self.var(x);
                let n = xv.value().shape()[1];
                out.push((x, xv.softmax()?.mul(g.broadcast_cols(n)?)?));
            }
            Sqrt(x) => out.push((x, g.mul(me.recip()?)?.scale(0.5))),
            Recip(x) => out.push((x, g.mul(me.mul(me)?)?.scale(-1.0))),
            Opaque(x, vjp) => {
                let value = vjp(&self.value_of(x), &g.value())?;
                out.push((x, self.push(value, OpaqueGrad(x, g.id))));
            }
            OpaqueGrad(..) => {
                return Err(Error::Capability(
                    "cannot differentiate through the backward rule of an opaque operation".into(),
                ))
            }
        }
        Ok(out)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op)
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.push(v, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let v = self.value().transpose()?;
        Ok(self.push(v, Op::Transpose(self.id)))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().add(&rhs.value())?;
        Ok(self.push(v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().sub(&rhs.value())?;
        Ok(self.push(v, Op::Sub(self.id, rhs.id)))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b)?;
        Ok(self.push(v, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.push(v, Op::Scale(self.id, c))
    }

    /// Elementwise product with a tensor treated as a constant.
    pub fn mul_const(self, mask: Rc<Tensor>) -> Result<Var<'g>> {
        let v = self.value().zip_map(&mask, |a, b| a * b)?;
        Ok(self.push(v, Op::MulConst(self.id, mask)))
    }

    /// `[m, n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let (m, n) = as_matrix(&x, "add_bias")?;
        if b.shape() != [n] {
            return Err(dim_err!("bias {:?} does not fit rows of {:?}", b.shape(), x.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::AddBias(self.id, bias.id)))
    }

    /// `[m, n] -> [n]`, summing over rows.
    pub fn sum_rows(self) -> Result<Var<'g>> {
        let x = self.value();
        let (_, n) = as_matrix(&x, "sum_rows")?;
        let mut acc = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(self.push(Tensor::from_vec(acc), Op::SumRows(self.id)))
    }

    /// `[m, n] -> [m]`, summing within each row.
    pub fn sum_cols(self) -> Result<Var<'g>> {
        let x = self.value();
        let (_, n) = as_matrix(&x, "sum_cols")?;
        let acc = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor::from_vec(acc), Op::SumCols(self.id)))
    }

    /// `[n] -> [m, n]`.
    pub fn broadcast_rows(self, m: usize) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape().len() != 1 {
            return Err(dim_err!("broadcast_rows expects a vector, got {:?}", v.shape()));
        }
        let n = v.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::BroadcastRows(self.id)))
    }

    /// `[m] -> [m, n]`.
    pub fn broadcast_cols(self, n: usize) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape().len() != 1 {
            return Err(dim_err!("broadcast_cols expects a vector, got {:?}", v.shape()));
        }
        let m = v.len();
        let data = v
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat(x).take(n))
            .collect();
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::BroadcastCols(self.id)))
    }

    pub fn sum_all(self) -> Var<'g> {
        let s = self.value().sum();
        self.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Broadcasts a one-element value to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        if v.len() != 1 {
            return Err(dim_err!("expand needs a one-element value, got {:?}", v.shape()));
        }
        Ok(self.push(Tensor::full(shape, v.item()), Op::Expand(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(self.id)))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(self) -> Result<Var<'g>> {
        let x = self.value();
        let (m, n) = as_matrix(&x, "softmax")?;
        let mut data = Vec::with_capacity(m * n);
        for row in x.data().chunks(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= z;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Softmax(self.id)))
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m]`.
    pub fn logsumexp(self) -> Result<Var<'g>> {
        let x = self.value();
        let (_, n) = as_matrix(&x, "logsumexp")?;
        let out = x
            .data()
            .chunks(n)
            .map(|row| {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::LogSumExp(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        Ok(self.push(x.map(f64::sqrt), Op::Sqrt(self.id)))
    }

    pub fn recip(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("reciprocal of zero".into()));
        }
        Ok(self.push(x.map(|v| 1.0 / v), Op::Recip(self.id)))
    }

    pub fn dot(self, rhs: Var<'g>) -> Result<Var<'g>> {
        Ok(self.mul(rhs)?.sum_all())
    }

    pub fn sq_norm(self) -> Result<Var<'g>> {
        self.dot(self)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'g>> {
        let mask = self.value().map(|v| if v > 0.0 { 1.0 } else { slope });
        self.mul_const(Rc::new(mask))
    }

    /// Elementwise absolute value with subgradient `sign(x)` (zero at zero).
    pub fn abs(self) -> Result<Var<'g>> {
        let mask = self.value().map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.mul_const(Rc::new(mask))
    }
}
