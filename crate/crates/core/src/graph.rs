//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Graph`] records each operation as it is evaluated. Calling
//! [`Graph::backward`] on a single-element result sweeps the tape in reverse
//! and returns a [`Gradients`] map holding one tensor per leaf created with
//! `requires_grad = true`. A graph can be differentiated once; a second call
//! returns [`Error::StaleGraph`].
//!
//! Large read-only operands (network weights) can be borrowed into the graph
//! with [`Graph::constant_ref`] so that building a tape never copies them.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ActivationKind, BatchNormParams, ConvGeometry, ElementwiseKind};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise(ElementwiseKind, Var, Var),
    ElementwiseScalar(ElementwiseKind, Var, f32),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Activation(ActivationKind, Var),
    BatchNorm {
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    },
    Reshape(Var),
    UpsampleNearest(Var, usize),
    Sum(Var),
    /// Maximum over all entries; `index` is the winning flat position.
    MaxAll {
        x: Var,
        index: usize,
    },
    Select {
        x: Var,
        index: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Elementwise(_, a, b) => vec![a, b],
            Op::ElementwiseScalar(_, a, _)
            | Op::Activation(_, a)
            | Op::Reshape(a)
            | Op::UpsampleNearest(a, _)
            | Op::Sum(a)
            | Op::MaxAll { x: a, .. }
            | Op::Select { x: a, .. } => vec![a],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, k, b, .. } | Op::ConvTranspose2d { x, k, b, .. } => {
                let mut v = vec![x, k];
                v.extend(b);
                v
            }
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                ..
            } => vec![x, mean, var, gamma, beta],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    /// True if any gradient-requiring leaf is reachable through this node.
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a graph.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    differentiated: bool,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrows a tensor as a non-differentiable leaf without copying it.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn get(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.as_ref())
            .ok_or(Error::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // -- elementwise --------------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let y = ops::elementwise(kind, self.get(a)?, self.get(b)?)?;
        Ok(self.push(y, Op::Elementwise(kind, a, b)))
    }

    pub fn elementwise_scalar(&mut self, kind: ElementwiseKind, a: Var, s: f32) -> Result<Var> {
        let y = ops::elementwise_scalar(kind, self.get(a)?, s);
        Ok(self.push(y, Op::ElementwiseScalar(kind, a, s)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Max, a, b)
    }

    // -- layers -------------------------------------------------------------

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::dense(self.get(x)?, self.get(w)?, self.get(b)?)?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.get(b)).transpose()?;
        let y = ops::conv2d(self.get(x)?, self.get(k)?, bias, geom)?;
        Ok(self.push(y, Op::Conv2d { x, k, b, geom }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.get(b)).transpose()?;
        let y = ops::conv_transpose2d(self.get(x)?, self.get(k)?, bias, geom)?;
        Ok(self.push(y, Op::ConvTranspose2d { x, k, b, geom }))
    }

    pub fn activation(&mut self, kind: ActivationKind, x: Var) -> Result<Var> {
        let y = ops::activation(kind, self.get(x)?);
        Ok(self.push(y, Op::Activation(kind, x)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var> {
        let params = BatchNormParams {
            mean: self.get(mean)?,
            var: self.get(var)?,
            gamma: self.get(gamma)?,
            beta: self.get(beta)?,
            eps,
        };
        let y = ops::batchnorm_inference(self.get(x)?, params)?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.get(x)?.reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.get(x)?, factor)?;
        Ok(self.push(y, Op::UpsampleNearest(x, factor)))
    }

    // -- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.get(x)?.sum());
        Ok(self.push(y, Op::Sum(x)))
    }

    /// Largest entry; the gradient flows to the first maximal position.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let t = self.get(x)?;
        let index = t.argmax();
        let y = Tensor::scalar(t.data()[index]);
        Ok(self.push(y, Op::MaxAll { x, index }))
    }

    /// Entry at a flat row-major position.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.get(x)?;
        let v = *t.data().get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("index {index} out of range for {:?}", t.shape()))
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }))
    }

    // -- backward -----------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::StaleGraph);
        }
        let loss_shape = self.get(loss)?.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.differentiated = true;

        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(&loss_shape));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                adj[id] = Some(dy);
                continue;
            }
            for (input, grad) in self.local_grads(id, &dy)? {
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        let mut grads = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                let g = adj[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(Var(id), g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `id` for each input that needs a
    /// gradient.
    fn local_grads(&self, id: usize, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let mut out = Vec::new();
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Elementwise(kind, a, b) => {
                let (av, bv) = (val(a), val(b));
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for ((&x, &y), &g) in av.data().iter().zip(bv.data()).zip(dy.data()) {
                    let (da, db) = kind.partials(x, y);
                    ga.push(g * da);
                    gb.push(g * db);
                }
                if needs(a) {
                    out.push((a, Tensor::new(av.shape().to_vec(), ga)?));
                }
                if needs(b) {
                    out.push((b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::ElementwiseScalar(kind, a, s) => {
                let g = val(a).zip_map(dy, |x, g| g * kind.partials(x, s).0)?;
                out.push((a, g));
            }
            Op::Dense { x, w, b } => {
                if needs(x) {
                    out.push((x, ops::dense_grad_input(dy, val(w))));
                }
                if needs(w) {
                    out.push((w, ops::dense_grad_weight(dy, val(x))));
                }
                if needs(b) {
                    out.push((b, ops::dense_grad_bias(dy)));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let xs = val(x).shape();
                if needs(x) {
                    out.push((x, ops::conv2d_grad_input(dy, val(k), geom, xs[2], xs[3])));
                }
                if needs(k) {
                    out.push((k, ops::conv2d_grad_kernel(val(x), dy, val(k).shape(), geom)));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    out.push((b, ops::channel_sum(dy)));
                }
            }
            Op::ConvTranspose2d { x, k, b, geom } => {
                let xs = val(x).shape();
                if needs(x) {
                    out.push((
                        x,
                        ops::conv_transpose2d_grad_input(dy, val(k), geom, xs[2], xs[3]),
                    ));
                }
                if needs(k) {
                    out.push((
                        k,
                        ops::conv_transpose2d_grad_kernel(val(x), dy, val(k).shape(), geom),
                    ));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    out.push((b, ops::channel_sum(dy)));
                }
            }
            Op::Activation(kind, x) => {
                out.push((x, ops::activation_grad(kind, val(x), &self.nodes[id].value, dy)));
            }
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let params = BatchNormParams {
                    mean: val(mean),
                    var: val(var),
                    gamma: val(gamma),
                    beta: val(beta),
                    eps,
                };
                let g = ops::batchnorm_grad(val(x), params, dy)?;
                for (v, t) in [(x, g.x), (mean, g.mean), (var, g.var), (gamma, g.gamma), (beta, g.beta)] {
                    if needs(v) {
                        out.push((v, t));
                    }
                }
            }
            Op::Reshape(x) => {
                out.push((x, dy.reshape(val(x).shape())?));
            }
            Op::UpsampleNearest(x, factor) => {
                out.push((x, ops::upsample_nearest_grad(dy, factor)));
            }
            Op::Sum(x) => {
                out.push((x, Tensor::full(val(x).shape(), dy.data()[0])));
            }
            Op::MaxAll { x, index } | Op::Select { x, index } => {
                let mut g = Tensor::zeros(val(x).shape());
                g.data_mut()[index] = dy.data()[0];
                out.push((x, g));
            }
        }
        Ok(out)
    }
}
