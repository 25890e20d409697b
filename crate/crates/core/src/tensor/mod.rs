//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations whose
//! inputs require gradients record a backward rule ([`autograd::Op`]) that
//! points at the parent tensors, so the tape is the graph itself: acyclic by
//! construction, released when the last handle to the loss is dropped.
//!
//! Only leaves created with [`Tensor::param`] keep their gradient after
//! [`Tensor::backward`]; intermediate gradients are released as soon as they
//! have been propagated.

mod autograd;
pub mod checkpoint;
pub(crate) mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use autograd::Op;
use kernels::numel;

pub use ops::{shared_batch_norm, BatchStats};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
    grad: RefCell<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.name())
            .finish()
    }
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
            grad: RefCell::new(None),
        }))
    }

    /// Record `op` only if some parent participates in the tape.
    pub(crate) fn derived(
        data: Vec<f64>,
        shape: Vec<usize>,
        track: bool,
        op: impl FnOnce() -> Op,
    ) -> Tensor {
        if track {
            Tensor::from_parts(data, shape, true, op())
        } else {
            Tensor::from_parts(data, shape, false, Op::Leaf)
        }
    }

    /// A constant tensor (never receives gradients).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "data of length {} does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, Op::Leaf))
    }

    /// A leaf that participates in the tape and keeps its gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "data of length {} does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), true, Op::Leaf))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![v], vec![], false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_parts(vec![0.0; numel(shape)], shape.to_vec(), false, Op::Leaf)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_parts(vec![v; numel(shape)], shape.to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Gradient from the last backward pass, `None` if this tensor was not
    /// reached from the loss.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    /// Gradient, with unreached tensors reporting exact zeros.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Drop any gradient held by this tensor.
    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Forward identity that contributes nothing to the gradients of its ancestors.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::from_parts(self.0.data.clone(), self.0.shape.clone(), false, Op::Leaf)
    }

    /// Populate gradients of every leaf reachable from this scalar.
    ///
    /// Each call recomputes gradients from scratch for the nodes it reaches,
    /// so repeating it on the same graph gives identical results.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for t in &order {
            *t.0.grad.borrow_mut() = None;
        }
        *self.0.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            if t.is_leaf() {
                continue;
            }
            let g = t.0.grad.borrow_mut().take();
            if let Some(g) = g {
                t.0.op.backward(&t.0, &g);
            }
        }
        Ok(())
    }

    /// Post-order (parents first) over the tracked subgraph.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut visited = std::collections::HashSet::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents().into_iter().rev() {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Accumulate into this tensor's gradient buffer.
    pub(crate) fn accumulate(&self, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.0.data.len()]);
        f(buf);
    }
}
