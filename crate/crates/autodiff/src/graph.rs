//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and the backward pass is a single reverse scan.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    ExpandLeading { x: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, kernel: usize, cols: Vec<T> },
    Pool { x: Var, weights: Vec<(usize, T)> },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the node's shape if nothing flowed into it.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor; gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a constant input (never receives gradients).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds `delta` into the gradient slot of `v` if `v` tracks gradients.
    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        delta: impl FnOnce() -> Vec<T>,
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let d = delta();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d) {
                    *e += x;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor::new(&shape, d).expect("gradient shape"));
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        use crate::ops::{elementwise as ew, linalg, nn, pool, shape};
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.data().to_vec());
                self.accumulate(grads, *b, || g.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.data().to_vec());
                self.accumulate(grads, *b, || g.data().iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => ew::backward_mul(self, *a, *b, g, grads),
            Op::AddBcast(x, b) => ew::backward_add_bcast(self, *x, *b, g, grads),
            Op::MulBcast(x, s) => ew::backward_mul_bcast(self, *x, *s, g, grads),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, || g.data().iter().map(|&v| v * c).collect());
            }
            Op::AddConst(x) => self.accumulate(grads, *x, || g.data().to_vec()),
            Op::MatMul(a, b) => linalg::backward_matmul(self, *a, *b, g, grads),
            Op::Bmm { a, b, trans_b } => linalg::backward_bmm(self, *a, *b, *trans_b, g, grads),
            Op::Softmax { x, axis } => nn::backward_softmax(self, *x, *axis, out, g, grads),
            Op::LogSoftmax { x } => nn::backward_log_softmax(self, *x, out, g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => nn::backward_layer_norm(self, *x, *gamma, *beta, xhat, rstd, g, grads),
            Op::L2Normalize { x, norms } => nn::backward_l2_normalize(self, *x, norms, out, g, grads),
            Op::Gelu(x) => ew::backward_unary(self, *x, g, grads, ew::gelu_grad),
            Op::Sigmoid(x) => {
                let y = out.data();
                self.accumulate(grads, *x, || {
                    g.data()
                        .iter()
                        .zip(y)
                        .map(|(&gv, &s)| gv * s * (T::one() - s))
                        .collect()
                });
            }
            Op::Relu(x) => ew::backward_unary(self, *x, g, grads, |v| {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Softplus(x) => ew::backward_unary(self, *x, g, grads, ew::sigmoid_scalar),
            Op::Reshape(x) => self.accumulate(grads, *x, || g.data().to_vec()),
            Op::Permute { x, perm } => shape::backward_permute(self, *x, perm, g, grads),
            Op::Slice { x, axis, start } => shape::backward_slice(self, *x, *axis, *start, g, grads),
            Op::Concat { parts, axis } => shape::backward_concat(self, parts, *axis, g, grads),
            Op::ExpandLeading { x } => shape::backward_expand_leading(self, *x, g, grads),
            Op::SumAxis { x, axis } => shape::backward_reduce_axis(self, *x, *axis, T::one(), g, grads),
            Op::MeanAxis { x, axis } => {
                let len = self.shape(*x)[*axis];
                let scale = T::one() / T::lit(len as f64);
                shape::backward_reduce_axis(self, *x, *axis, scale, g, grads)
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let n = self.value(*x).len();
                self.accumulate(grads, *x, || vec![gv; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gv = g.item() / T::lit(n as f64);
                self.accumulate(grads, *x, || vec![gv; n]);
            }
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                cols,
            } => linalg::backward_conv2d(self, *x, *w, *b, *kernel, cols, g, grads),
            Op::Pool { x, weights, .. } => pool::backward_pool(self, *x, weights, g, grads),
        }
    }
}
