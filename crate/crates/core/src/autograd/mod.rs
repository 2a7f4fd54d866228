//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. [`Graph::backward`] walks the tape in reverse and leaves a gradient
//! on every node that depends on a differentiable leaf. Graphs are single-use:
//! build one per forward pass and drop it after copying parameter gradients
//! into the [`ParamStore`].

pub mod gradcheck;
pub mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: kernels::Window },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: kernels::Window },
    GlobalAvgPool(Var),
    ScaleChannels(Var, Var),
    Upsample(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<S> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(ParamId, Var)>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by a parameter (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node, so
    /// weights shared between branches accumulate a single gradient. A graph
    /// must only ever read from one store: leaves are keyed by id alone.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.push((id, v));
        v
    }

    /// Number of distinct parameter leaves read so far.
    pub fn param_leaves(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every trainable parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        for &(id, v) in &self.params {
            if !store.get(id).trainable {
                continue;
            }
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, &g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}
