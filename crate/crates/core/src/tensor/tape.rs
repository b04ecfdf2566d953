use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Given the output gradient, returns one optional gradient per parent.
/// Parents that do not require gradients get `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tape<T>, &[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, which is a valid topological order,
/// so [`Tape::backward`] is a single reverse sweep.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    pattern: u64,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            pattern: 0xcbf2_9ce4_8422_2325,
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
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

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fingerprint of every piecewise branch taken so far (ReLU signs,
    /// max-pool winners). Two forward passes with equal fingerprints went
    /// through the same linear region.
    pub fn activation_pattern(&self) -> u64 {
        self.pattern
    }

    pub(crate) fn mix_pattern(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.pattern = (self.pattern ^ b).wrapping_mul(0x0100_0000_01b3);
        }
    }

    /// Records an operation. The backward rule is dropped when no parent
    /// requires a gradient, turning the node into a constant.
    pub(crate) fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
            parents: if requires_grad { parents } else { Vec::new() },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively when a
    /// value feeds several consumers; only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("expected a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            let parent_grads = backward(self, &out_grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
