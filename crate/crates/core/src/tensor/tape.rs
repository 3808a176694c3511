use super::ops::Op;
use super::{Float, Tensor};
use crate::error::{FecError, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Coarse operation tags, used to report and to inject backward faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    AddBias,
    ScaleShift,
    Sigmoid,
    Gelu,
    Sum,
    Mean,
    Reshape,
    RowNorm,
    AdaPool,
    Similarity,
    Aggregate,
    GatherRows,
    PickPerRow,
    BatchMatMul,
    SoftmaxXent,
}

/// Deliberately scales the input gradients produced by one kind of op.
/// Used as a negative control for the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub kind: OpKind,
    pub factor: f64,
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Wengert list for one forward pass. Every op appends a node whose inputs
/// were appended before it, so reverse order is a valid topological order.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<BackwardFault>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self { fault: Some(fault), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves created with `requires_grad` collect
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf. A leaf that requires grad but was never
    /// reached reports zeros; anything else reports `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Propagates d(root)/d(leaf) into every leaf that requires grad. Repeated
    /// calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| FecError::Contract(format!("node {} is not on this tape", root.0)))?;
        if root_node.value.len() != 1 {
            return Err(FecError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let scale = match self.fault {
                Some(f) if f.kind == node.op.kind() => Some(T::of(f.factor)),
                _ => None,
            };
            for (input, mut contribution) in self.input_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if let Some(s) = scale {
                    contribution.iter_mut().for_each(|x| *x *= s);
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }
}
