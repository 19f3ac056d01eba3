//! Reverse-mode automatic differentiation over `ndarray` buffers.
//!
//! The model is small enough that a plain tape suffices: each op produces a
//! node holding its forward value, the parent handles and a backward closure.
//! Calling [`Tensor::backward`] on a scalar walks the graph in reverse
//! topological order and accumulates gradients into the leaves.
//!
//! Everything is `f64`. That keeps the finite-difference gradient checks and
//! the training path on one code path, and the network is small enough that
//! double precision stays inside the runtime budget.
//!
//! Tensors are reference counted and single-threaded (`Rc`); kernels may still
//! parallelize internally over disjoint output slices. In no-grad mode (see
//! [`no_grad`]) ops record neither parents nor closures, so intermediate
//! buffers free as soon as they go out of scope.

pub(crate) mod conv;
mod ops;
mod resize;

pub use conv::conv2d;
pub use ops::*;
pub use resize::{bilinear_resize, pixel_shuffle, space_to_depth};

use crate::gauge;
use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// True while gradient recording is active on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables gradient recording for the extent of the guard.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with gradient recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>, &[Tensor])>;

pub(crate) struct Inner {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    bytes: usize,
}

impl Drop for Inner {
    fn drop(&mut self) {
        gauge::unregister(self.bytes);
    }
}

/// A node in the autodiff graph. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

impl Tensor {
    fn construct(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Tensor {
        let bytes = data.len() * std::mem::size_of::<f64>();
        gauge::register(bytes);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward,
                requires_grad,
                bytes,
            }),
        }
    }

    /// A constant: participates in forward math, receives no gradient.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor::construct(data, Vec::new(), None, false)
    }

    /// A trainable leaf.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor::construct(data, Vec::new(), None, true)
    }

    /// Result of an op. Records the tape entry only when gradients are both
    /// enabled and reachable from a leaf.
    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Tensor::construct(data, parents, Some(backward), true)
        } else {
            Tensor::constant(data)
        }
    }

    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape/len mismatch"))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.inner.data.borrow().clone()
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
        self.inner.requires_grad
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        *d.iter().next().unwrap()
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the buffer in place (optimizer updates, checkpoint load).
    pub fn set_data(&self, data: ArrayD<f64>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data shape mismatch");
        *d = data;
    }

    pub(crate) fn accumulate_grad(&self, delta: &ArrayD<f64>) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => *g += delta,
            None => *slot = Some(delta.clone()),
        }
    }

    /// Runs reverse-mode accumulation from this scalar. Gradients of interior
    /// nodes are freed as soon as they have been consumed; leaf gradients
    /// stay for the optimizer.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() expects a scalar loss");
        let topo = self.topo_order();
        {
            let mut g = self.inner.grad.borrow_mut();
            *g = Some(ArrayD::from_elem(IxDyn(&self.shape()), 1.0));
        }
        for node in topo.iter().rev() {
            let Some(bw) = node.inner.backward.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let data = node.inner.data.borrow();
            bw(&grad, &data, &node.inner.parents);
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        // Iterative post-order DFS; visited keyed by node id.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child)) = stack.pop() {
            let parents = &node.inner.parents;
            if child < parents.len() {
                stack.push((node.clone(), child + 1));
                let p = &parents[child];
                if p.requires_grad() && !visited.contains(&p.inner.id) {
                    visited.insert(p.inner.id);
                    stack.push((p.clone(), 0));
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
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
