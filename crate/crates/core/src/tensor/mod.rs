//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation; differentiable ops build an implicit
//! tape by holding `Rc` references to their inputs together with a VJP
//! closure. [`Tensor::backward`] replays the tape in reverse topological
//! order and accumulates gradients into `requires_grad` leaves. Because the
//! graph only ever points from outputs to inputs, it is acyclic by
//! construction.
//!
//! Shape violations panic with a message naming both shapes; file- and
//! data-level errors elsewhere in the crate return `Result`.

mod ops;
mod real;

pub use ops::*;
pub use real::{DType, Real};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// VJP: maps (output data, output shape, upstream gradient) to one optional
/// gradient per parent, in parent order.
type Vjp<T> = Box<dyn Fn(&[T], &[usize], &[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    parents: Vec<Tensor<T>>,
    vjp: Vjp<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Dense n-dimensional array. Cloning is cheap (shared storage).
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(debug_assertions)]
fn assert_finite<T: Real>(data: &[T], op: &str) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {v:?} produced by `{op}` at flat index {i}"
        );
    }
}

#[cfg(not(debug_assertions))]
fn assert_finite<T: Real>(_data: &[T], _op: &str) {}

impl<T: Real> Tensor<T> {
    fn construct(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Non-differentiable leaf.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        assert_finite(&data, "Tensor::new");
        Self::construct(data, shape.to_vec(), false, None)
    }

    /// Trainable leaf: participates in the tape and receives gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        assert_finite(&data, "Tensor::param");
        Self::construct(data, shape.to_vec(), true, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![T::ZERO; numel_of(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(vec![T::ONE; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(vec![v; numel_of(shape)], shape)
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op_name: &str,
        vjp: Vjp<T>,
    ) -> Self {
        assert_finite(&data, op_name);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        // Tensors outside any differentiable path carry no tape node, so
        // frozen forward passes allocate no graph.
        let node = if requires_grad {
            Some(Node { parents, vjp })
        } else {
            None
        };
        Self::construct(data, shape, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() requires a scalar tensor, got shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    /// Leaf view of the same data with no history and no gradient.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.to_vec(), self.shape())
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient for a `requires_grad` leaf; zero-filled when no gradient
    /// flowed to it (a leaf not participating in the loss).
    pub fn grad_or_zeros(&self) -> Vec<T> {
        assert!(
            self.requires_grad(),
            "grad_or_zeros() on a tensor that does not require grad"
        );
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![T::ZERO; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` leaf reachable from `self`; repeated calls keep
    /// accumulating until [`Tensor::zero_grad`].
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );

        // Iterative post-order DFS over parent edges: every node ends up
        // after all of its parents, so the reversed order processes each
        // consumer before its producers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((t, pi)) = stack.pop() {
            if pi == 0 {
                if visited.contains_key(&t.inner.id) {
                    continue;
                }
                visited.insert(t.inner.id, ());
            }
            let nparents = t.inner.node.as_ref().map_or(0, |n| n.parents.len());
            if pi < nparents {
                let parent = t.inner.node.as_ref().unwrap().parents[pi].clone();
                stack.push((t, pi + 1));
                if !visited.contains_key(&parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.inner.id, vec![T::ONE]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.inner.id) else {
                continue;
            };
            match &t.inner.node {
                Some(node) => {
                    let parent_grads = (node.vjp)(&t.inner.data, &t.inner.shape, &g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "vjp gradient shape mismatch");
                        match grads.get_mut(&parent.inner.id) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += *b;
                                }
                            }
                            None => {
                                grads.insert(parent.inner.id, pg);
                            }
                        }
                    }
                }
                None => {
                    if t.requires_grad() {
                        let mut slot = t.inner.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += *b;
                                }
                            }
                            None => *slot = Some(g),
                        }
                    }
                }
            }
        }
    }

    /// Cast to another precision, dropping any tape history.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64(v.to_f64()))
            .collect();
        if self.requires_grad() {
            Tensor::param(data, self.shape())
        } else {
            Tensor::new(data, self.shape())
        }
    }
}
