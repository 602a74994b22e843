//! Minimal reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its forward
//! value and enough saved state to run its vector-Jacobian product. Nodes are
//! only ever appended, so node order is a topological order and
//! [`Graph::backward`] replays it in reverse.
//!
//! Broadcasting is deliberately narrow. Binary elementwise ops accept a right
//! operand whose shape equals the left shape or is a trailing suffix of it
//! (`[D]` against `[B, S, D]`); batched matmul accepts a right operand that
//! is either 2-D or carries exactly the left operand's batch dimensions.

mod ops;
mod scalar;

use thiserror::Error;

pub use scalar::Scalar;
pub(crate) use scalar::{gemm, MatRef};

use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense array plus the gradient bookkeeping of one tape node.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

struct Node<F> {
    tensor: Tensor<F>,
    op: Op<F>,
}

/// The tape. Build one per forward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let mut t = Tensor::new(shape.to_vec(), data)?;
        t.requires_grad = true;
        Ok(self.push_tensor(t, Op::Leaf))
    }

    /// Non-trainable leaf (inputs, noise, fixed tables).
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_tensor(t, Op::Leaf))
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push_tensor(
            Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None },
            Op::Leaf,
        )
    }

    pub fn tensor(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> F {
        self.value(v)[0]
    }

    fn push_tensor(&mut self, tensor: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad =
            op.inputs().iter().flatten().any(|v| self.nodes[v.0].tensor.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_tensor(Tensor { shape, data, requires_grad, grad: None }, op)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Afterwards every `requires_grad` node the loss depends on carries a
    /// gradient; nodes the loss does not reach keep `None`. Calling it again
    /// on the same graph recomputes from scratch rather than accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].tensor.numel();
        if numel != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                node.op.backward(&self.nodes, &node.tensor, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.tensor.requires_grad {
                node.tensor.grad = g;
            }
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
