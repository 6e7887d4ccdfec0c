//! A small reverse-mode autodiff engine over `f64` ndarrays.
//!
//! The graph is built dynamically: every operation returns a new [`Tensor`]
//! that records its parents and a closure that routes gradients back to
//! them. Calling [`Tensor::backward`] on a scalar walks the graph in
//! reverse topological order and accumulates gradients into every node
//! that requires them, leaves and intermediates alike (intermediate
//! gradients are what class-activation mapping reads).
//!
//! Everything is `f64`, single-threaded and deterministic: the same graph
//! on the same inputs produces bitwise-identical values and gradients.

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

pub mod conv;
pub mod ops;
pub mod shape;

/// Dynamic-dimensional `f64` array, the only element type the engine supports.
pub type Arr = ArrayD<f64>;

type BackFn = Box<dyn Fn(&Arr)>;

struct Inner {
    data: RefCell<Arr>,
    grad: RefCell<Option<Arr>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackFn>,
}

/// A node in the autodiff graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    fn new(data: Arr, requires_grad: bool, parents: Vec<Tensor>, backward_fn: Option<BackFn>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward_fn,
            }),
        }
    }

    /// Trainable leaf (model parameter).
    pub fn param(data: Arr) -> Self {
        Tensor::new(data, true, Vec::new(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(data: Arr) -> Self {
        Tensor::new(data, false, Vec::new(), None)
    }

    /// Leaf input, optionally differentiable (attack surfaces need input grads).
    pub fn input(data: Arr, requires_grad: bool) -> Self {
        Tensor::new(data, requires_grad, Vec::new(), None)
    }

    /// 0-dimensional constant.
    pub fn scalar(v: f64) -> Self {
        Tensor::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Build a non-leaf node. If no parent requires a gradient the graph is
    /// pruned here and a plain constant is returned.
    pub(crate) fn from_op(data: Arr, parents: Vec<Tensor>, f: BackFn) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor::new(data, true, parents, Some(f))
        } else {
            Tensor::constant(data)
        }
    }

    /// Clone of the underlying array.
    pub fn value(&self) -> Arr {
        self.inner.data.borrow().clone()
    }

    /// Extract a 0-dimensional value.
    pub fn value_scalar(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "value_scalar on non-scalar tensor");
        *d.iter().next().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip trainability of a leaf in place. Only meaningful on leaves;
    /// graphs already built keep the flag they were built with.
    pub fn set_requires_grad(&self, rg: bool) {
        self.inner.requires_grad.set(rg);
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Arr> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutate the underlying data in place (optimizer updates).
    pub fn update_data<F: FnOnce(&mut Arr)>(&self, f: F) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Replace the underlying data (checkpoint restore). Shape must match.
    pub fn set_data(&self, data: Arr) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data shape mismatch");
        *d = data;
    }

    pub(crate) fn with_data<R, F: FnOnce(&Arr) -> R>(&self, f: F) -> R {
        f(&self.inner.data.borrow())
    }

    pub(crate) fn accum_grad(&self, g: &Arr) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Backpropagate from a scalar node with seed gradient 1.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar; use backward_with");
        let seed = Arr::from_elem(IxDyn(self.inner.data.borrow().shape()), 1.0);
        self.backward_with(&seed);
    }

    /// Backpropagate with an explicit seed gradient of the node's shape.
    pub fn backward_with(&self, seed: &Arr) {
        assert!(self.requires_grad(), "backward on a node that requires no gradient");
        self.accum_grad(seed);
        let order = self.topo_order();
        for node in order.iter().rev() {
            if let Some(f) = &node.inner.backward_fn {
                let g = node
                    .inner
                    .grad
                    .borrow()
                    .clone()
                    .expect("node in topological order missing gradient");
                f(&g);
            }
        }
    }

    // Iterative post-order DFS over parents; reverse gives root-first order.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        // stack of (node, parent cursor)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.inner.parents.len() {
                let parent = node.inner.parents[cursor].clone();
                stack.push((node, cursor + 1));
                let key = Rc::as_ptr(&parent.inner);
                if parent.requires_grad() && !visited.contains(&key) {
                    visited.insert(key);
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
