//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor is an immutable node behind an `Arc`. Operations on tracked
//! inputs record their parents and whatever forward values the backward rule
//! needs; operations on untracked inputs produce plain leaves, so evaluation
//! code builds no graph at all.
//!
//! Node ids come from a global counter, so a parent always has a smaller id
//! than anything built from it. Sorting the reachable nodes by descending id
//! is therefore a valid reverse topological order, and `backward` visits each
//! node exactly once.

mod backward;
mod kernels;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::scalar::Scalar;

pub use ops::ReduceKind;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    Index { label: usize, classes: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Recorded operation of a non-leaf node.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul(Tensor<T>, Tensor<T>),
    Transpose(Tensor<T>),
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddRow(Tensor<T>, Tensor<T>),
    Relu(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Exp(Tensor<T>),
    Log(Tensor<T>),
    Neg(Tensor<T>),
    Scale(Tensor<T>, T),
    Reduce {
        input: Tensor<T>,
        kind: ReduceKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    Softmax(Tensor<T>),
    CrossEntropy {
        logits: Tensor<T>,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    NormalizeRows {
        input: Tensor<T>,
        norms: Vec<T>,
        eps: T,
    },
    SqDistances(Tensor<T>, Tensor<T>),
    SliceRows(Tensor<T>, usize),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SqDistances(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _) => vec![a],
            Op::Reduce { input, .. } | Op::NormalizeRows { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    op: Op<T>,
}

/// A dense tensor. Cloning is cheap and shares the underlying node.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn build(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.parents().iter().any(|p| p.node.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Self {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Self {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op: Op::Leaf,
            }),
        }
    }

    /// Untracked tensor from a row-major buffer.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Tracked leaf: gradients accumulate into it on `backward`.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.requires_grad())
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![T::zero(); n], false)
    }

    /// A fresh tracked leaf sharing this tensor's values.
    pub fn requires_grad(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), true)
    }

    /// A fresh untracked leaf sharing this tensor's values.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    /// Converts to another precision; the result is an untracked leaf, or a
    /// tracked one if `self` was a tracked leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| v.cast::<U>()).collect();
        let tracked = self.node.requires_grad && matches!(self.node.op, Op::Leaf);
        Tensor::leaf(self.node.shape.clone(), data, tracked)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.op, Op::Leaf)
    }

    /// First element; intended for scalar tensors.
    pub fn item(&self) -> T {
        self.node.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Shape {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// Accumulated gradient, if `backward` has reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Back-propagates from a scalar tensor into every tracked leaf.
    ///
    /// Leaf gradients accumulate across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Err(TensorError::Contract(
                "backward called on a tensor not connected to any tracked leaf".into(),
            ));
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.node.id, ()).is_some() {
                continue;
            }
            for p in t.node.op.parents() {
                if p.node.requires_grad && !seen.contains_key(&p.node.id) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.node.id));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.node.id, vec![T::one()]);
        for t in &order {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            if t.is_leaf() {
                let mut slot = t.node.grad.lock().expect("grad lock poisoned");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a = *a + *v),
                    None => *slot = Some(g),
                }
            } else {
                backward::propagate(t, &g, &mut grads);
            }
        }
        Ok(())
    }
}

/// Adds `contribution` to the pending gradient of `target` if it is tracked.
pub(crate) fn accumulate<T: Scalar>(
    grads: &mut HashMap<u64, Vec<T>>,
    target: &Tensor<T>,
    contribution: Vec<T>,
) {
    if !target.node.requires_grad {
        return;
    }
    match grads.get_mut(&target.node.id) {
        Some(acc) => acc
            .iter_mut()
            .zip(contribution)
            .for_each(|(a, v)| *a = *a + v),
        None => {
            grads.insert(target.node.id, contribution);
        }
    }
}

#[cfg(test)]
mod tests;
