//! Reverse-mode gradient tape.
//!
//! Operations append nodes in forward execution order; [`Tape::backward`]
//! walks them in exact reverse, invoking each node's recorded closure.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct BackwardArgs<'g, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'g [T],
    pub inputs: &'g [&'g [T]],
    pub output: &'g [T],
    /// Which inputs want a gradient back.
    pub needs: &'g [bool],
}

pub(crate) type BackwardFn<'a, T> = Box<dyn FnOnce(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'a>;

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<'a, T>>,
    requires_grad: bool,
    is_leaf: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    keyed: HashMap<usize, Var>,
    grad_enabled: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), keyed: HashMap::new(), grad_enabled: true }
    }

    /// A tape that never records backward closures.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            inputs: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            is_leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned tensor; it participates in gradients if its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_leaf(Cow::Owned(t.into_data()), shape, requires)
    }

    /// Records a borrowed tensor without copying its buffer.
    pub fn leaf_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(Cow::Owned(t.into_data()), shape, false)
    }

    /// Borrowed leaf deduplicated by `key`: recording the same key twice
    /// returns the first handle, so every use accumulates into one gradient.
    pub fn keyed_leaf(&mut self, key: usize, t: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.keyed.get(&key) {
            return v;
        }
        let v = self.leaf_ref(t);
        self.keyed.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape matches value")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let vals = self.value(v);
        if vals.len() != 1 {
            return Err(NumericsError::Contract(format!("item() on value of shape {:?}", self.shape(v))));
        }
        Ok(vals[0])
    }

    /// Appends an operation node. The closure is kept only when some input
    /// requires a gradient.
    pub(crate) fn push_op<F>(&mut self, value: Vec<T>, shape: Vec<usize>, inputs: &[Var], backward: F) -> Var
    where
        F: FnOnce(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'a,
    {
        debug_assert_eq!(numel(&shape), value.len());
        let requires = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            inputs: inputs.to_vec(),
            backward: if requires { Some(Box::new(backward)) } else { None },
            requires_grad: requires,
            is_leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from a one-element `loss` back to every leaf
    /// that requires them. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(NumericsError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut leaf_grads = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { leaf_grads, keyed: self.keyed });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].is_leaf {
                leaf_grads.insert(i, g);
                continue;
            }
            let Some(f) = self.nodes[i].backward.take() else { continue };
            let node = &self.nodes[i];
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let values: Vec<&[T]> = node.inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            let out = f(&BackwardArgs { grad: &g, inputs: &values, output: &node.value, needs: &needs });
            debug_assert_eq!(out.len(), node.inputs.len());
            for ((input, need), gi) in node.inputs.iter().zip(&needs).zip(out) {
                let (true, Some(gi)) = (*need, gi) else { continue };
                debug_assert_eq!(gi.len(), self.nodes[input.0].value.len());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
            // release saved activations early
            self.nodes[i].value = Cow::Owned(Vec::new());
        }
        Ok(Gradients { leaf_grads, keyed: self.keyed })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaf_grads: HashMap<usize, Vec<T>>,
    keyed: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.leaf_grads.remove(&v.0)
    }

    /// Gradient of a leaf recorded through [`Tape::keyed_leaf`].
    pub fn keyed(&self, key: usize) -> Option<&[T]> {
        self.keyed.get(&key).and_then(|v| self.get(*v))
    }

    pub fn take_keyed(&mut self, key: usize) -> Option<Vec<T>> {
        let v = *self.keyed.get(&key)?;
        self.take(v)
    }

    /// Accumulates the gradient of `v` into `tensor.grad`.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<bool> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g).map(|_| true),
            None => Ok(false),
        }
    }

    pub fn len(&self) -> usize {
        self.leaf_grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_grads.is_empty()
    }
}
