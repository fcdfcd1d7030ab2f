use super::ops::Op;
use super::{Float, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the tape is a topological order of
/// the graph and backward is a single reverse sweep.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only accumulated for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant; gradient does not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.shape(root);
        if root_shape.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }
        let mut grads = GradBuf { slots: (0..=root.0).map(|_| None).collect(), tape: self };
        grads.slots[root.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..=root.0).rev() {
            let Some(gout) = grads.slots[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(gout);
                continue;
            }
            node.op.backward(&node.value, &gout, &mut grads);
        }
        Ok(Gradients { grads: leaves, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }
}

/// Gradient accumulators indexed by node id.
pub(crate) struct GradBuf<'t, T> {
    slots: Vec<Option<Vec<T>>>,
    tape: &'t Tape<T>,
}

impl<T: Float> GradBuf<'_, T> {
    /// Mutable gradient slot for `v`, or `None` when `v` is not on a
    /// gradient path.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); numel]).as_mut_slice())
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.tape.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    pub(crate) fn add(&mut self, v: Var, contrib: &[T]) {
        if let Some(slot) = self.slot(v) {
            for (s, &c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root with respect to `v`; zero when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(shape),
        }
    }
}
