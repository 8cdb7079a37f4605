//! Minimal dense-tensor compute core with reverse-mode differentiation.
//!
//! Tensors are row-major, reference-counted handles into a dynamically built
//! computation graph. An operation whose inputs all have `requires_grad ==
//! false` produces a plain leaf, so no graph is retained behind teacher
//! predictions or pseudo-targets.

mod ops;
mod optim;

pub use ops::{
    add, bilinear_upsample, conv2d, l2_normalize, mean, mul, norm2d, relu, scale, softmax, sum,
};
pub use optim::{clip_grad_total_norm, sgd_nesterov_step};

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradient rule of one operation: maps the output gradient to one optional
/// gradient per parent (in parent order).
type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

/// Dense n-dimensional tensor, optionally attached to the graph that
/// produced it.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward_fn: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        }
    }

    /// A constant leaf: carries data, never receives gradients.
    pub fn leaf(shape: &[usize], data: Vec<S>) -> Self {
        Tensor::new_node(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// A trainable leaf: gradients accumulate here during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<S>) -> Self {
        Tensor::new_node(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![S::zero(); n])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::leaf(&[], vec![v])
    }

    /// Builds an operation result. If no parent participates in the graph the
    /// result is a plain leaf and `backward_fn` is dropped.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward_fn: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.node.requires_grad) {
            Tensor::new_node(shape, data, true, parents, Some(Box::new(backward_fn)))
        } else {
            Tensor::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn data_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Replaces the stored values (optimizer and EMA updates).
    pub fn set_data(&self, data: Vec<S>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.node.data.borrow_mut() = data;
    }

    /// Extracts the single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> S {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites the gradient buffer (used by gradient clipping).
    pub fn set_grad(&self, grad: Vec<S>) {
        assert_eq!(grad.len(), self.numel(), "set_grad length mismatch");
        *self.node.grad.borrow_mut() = Some(grad);
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e = *e + *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-topological gradient accumulation from a scalar loss.
    ///
    /// Gradients sum over fan-out. Intermediate gradients are released once
    /// consumed; leaves keep theirs until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node.shape
            )));
        }
        let order = self.topo_order();
        *self.node.grad.borrow_mut() = Some(vec![S::one()]);
        for t in order.iter().rev() {
            let Some(back) = &t.node.backward_fn else {
                continue;
            };
            let out_grad = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_grads = back(&out_grad);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (parent, grad) in t.node.parents.iter().zip(parent_grads) {
                if !parent.node.requires_grad {
                    continue;
                }
                if let Some(g) = grad {
                    debug_assert_eq!(g.len(), parent.numel());
                    parent.accumulate_grad(&g);
                }
            }
            // interior node: gradient no longer needed
            *t.node.grad.borrow_mut() = None;
        }
        Ok(())
    }

    /// Post-order over the graph reachable through grad-requiring parents.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<S>> = HashSet::new();
        // explicit stack: (tensor, next parent index to visit)
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((t, idx)) = stack.pop() {
            if idx < t.node.parents.len() {
                let parent = t.node.parents[idx].clone();
                stack.push((t, idx + 1));
                let ptr = Rc::as_ptr(&parent.node);
                if parent.node.requires_grad && !visited.contains(&ptr) {
                    visited.insert(ptr);
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

/// Kind of entry a [`ParamSet`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable weight: optimizer, clipping and weight decay apply.
    Param,
    /// Persistent state (normalization running statistics): updated in
    /// forward passes and by EMA, never by the optimizer.
    Buffer,
}

struct Entry<S: Scalar> {
    tensor: Tensor<S>,
    kind: EntryKind,
    momentum: RefCell<Option<Vec<S>>>,
}

/// Named, lexicographically ordered collection of parameters and buffers,
/// together with the optimizer step counter and momentum state.
pub struct ParamSet<S: Scalar> {
    entries: BTreeMap<String, Entry<S>>,
    step: u64,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert_param(&mut self, name: &str, shape: &[usize], data: Vec<S>) {
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                tensor: Tensor::param(shape, data),
                kind: EntryKind::Param,
                momentum: RefCell::new(None),
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn insert_buffer(&mut self, name: &str, shape: &[usize], data: Vec<S>) {
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                tensor: Tensor::leaf(shape, data),
                kind: EntryKind::Buffer,
                momentum: RefCell::new(None),
            },
        );
        assert!(prev.is_none(), "duplicate buffer name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.entries[name].tensor
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn kind(&self, name: &str) -> EntryKind {
        self.entries[name].kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries in lexicographic name order.
    pub fn iter_all(&self) -> impl Iterator<Item = (&str, &Tensor<S>, EntryKind)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.as_str(), &e.tensor, e.kind))
    }

    /// Trainable parameters only, lexicographic order.
    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(n, e)| (n.as_str(), &e.tensor))
    }

    pub fn zero_grads(&self) {
        for e in self.entries.values() {
            e.tensor.zero_grad();
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Detached deep copy: same names, shapes and values, no gradient
    /// tracking, fresh momentum state. Used to spawn the teacher.
    pub fn clone_detached(&self) -> ParamSet<S> {
        let mut out = ParamSet::new();
        for (name, e) in &self.entries {
            out.entries.insert(
                name.clone(),
                Entry {
                    tensor: Tensor::leaf(e.tensor.shape(), e.tensor.data_vec()),
                    kind: e.kind,
                    momentum: RefCell::new(None),
                },
            );
        }
        out
    }

    /// Momentum buffer for a parameter, created zeroed on first access.
    pub(crate) fn with_momentum<R>(&self, name: &str, f: impl FnOnce(&mut Vec<S>) -> R) -> R {
        let e = &self.entries[name];
        let mut slot = e.momentum.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::zero(); e.tensor.numel()]);
        f(buf)
    }

    /// FNV-1a over shapes and value bit patterns; stable identity for
    /// provenance logging.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t, _) in self.iter_all() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for d in t.shape() {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in t.data().iter() {
                for b in (v.to_f64_lossy() as f32).to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}
