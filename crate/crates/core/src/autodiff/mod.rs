//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass together
//! with a closure computing the vector-Jacobian product for that operation.
//! [`Graph::backward`] then replays the tape in reverse. Graphs are cheap and
//! meant to be rebuilt for every forward pass (one per image during training).
//!
//! All numerics are generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod conv;
pub mod gradcheck;
mod ops;
mod real;
mod tensor;

pub use conv::{col2im, conv_out_size, im2col, ConvGeometry};
pub use real::{gemm, Real};
pub use tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an operation's backward closure may look at.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it and skip the work.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when any of `vars` participates in differentiation. Operations use
    /// this to avoid saving backward state during inference.
    pub fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an operation. The closure is dropped when no parent requires a
    /// gradient.
    pub fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.tracks(parents);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, parents.to_vec(), backward, requires_grad)
    }

    /// Records a value with no backward rule (an inference-only result).
    pub fn push_untracked(&mut self, value: Tensor<T>) -> Var {
        self.constant(value)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar node. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
