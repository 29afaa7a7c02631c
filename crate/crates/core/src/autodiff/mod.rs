//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every forward operation appends a node holding its output value and enough
//! saved state to run its vector-Jacobian product. [`Tape::backward`] walks
//! the nodes in reverse creation order, which is a valid topological order
//! because a node can only reference earlier nodes.
//!
//! A tape is owned by exactly one forward pass; nothing is shared between
//! tapes, so independent passes may run on different threads.

mod ops;

pub use ops::PoolMode;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Operation kinds, used for naming and for backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Gelu,
    Softmax,
    LayerNorm,
    Conv2d,
    Pool,
    Reshape,
    Permute,
    Concat,
    Narrow,
    Sum,
    Mean,
    SumSquares,
    Bce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::Pool => "pool",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumSquares => "sum_squares",
            OpKind::Bce => "bce",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        const ALL: [OpKind; 21] = [
            OpKind::Leaf,
            OpKind::MatMul,
            OpKind::BatchMatMul,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::Sigmoid,
            OpKind::Tanh,
            OpKind::Gelu,
            OpKind::Softmax,
            OpKind::LayerNorm,
            OpKind::Conv2d,
            OpKind::Pool,
            OpKind::Reshape,
            OpKind::Permute,
            OpKind::Concat,
            OpKind::Narrow,
            OpKind::Sum,
            OpKind::Mean,
            OpKind::SumSquares,
            OpKind::Bce,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: ops::Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: ops::Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Test fixture: make the backward pass of every `kind` node wrong by
    /// scaling its upstream gradient by 1.5.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, value: Tensor<T>, op: ops::Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name().to_string()));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", out.shape()),
            ));
        }
        if !out.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "backward".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, ops::Op::Leaf) {
                continue;
            }
            let Some(mut dy) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let k = T::lit(1.5);
                dy.iter_mut().for_each(|g| *g *= k);
            }
            self.backprop(idx, &dy, &mut grads);
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(idx, g)| {
                let node = &self.nodes[idx];
                if !(node.needs_grad && matches!(node.op, ops::Op::Leaf)) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf; `None` when the leaf did not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
