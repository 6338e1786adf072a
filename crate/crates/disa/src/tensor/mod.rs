//! Minimal dense-tensor reverse-mode autodiff.
//!
//! Tensors are immutable `f64` arrays linked into a define-by-run graph:
//! every operation computes its value eagerly and records a VJP closure
//! plus links to its parents. `backward` walks the reverse topological
//! order and accumulates gradients into every `requires_grad` leaf.
//! Graphs are rebuilt each forward pass and confined to one thread
//! (`Rc` interior), which is exactly the training-loop usage pattern.

mod ops;
pub mod check;

pub use ops::{concat, cosine_similarity, dot, kl_divergence};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

type VjpFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    /// Visit epoch for the topological sort; graphs are thread-confined.
    static TOPO_EPOCH: Cell<u64> = const { Cell::new(0) };
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    backward_ran: Cell<bool>,
    visited: Cell<u64>,
    parents: Vec<Tensor>,
    /// Maps the upstream gradient to per-parent gradients. `None` entries
    /// are parents whose gradient is not needed (requires_grad = false).
    vjp: Option<VjpFn>,
}

/// Dense row-major tensor of 64-bit reals, cheap to clone (shared node).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::invalid(
            "tensor",
            format!("shape {shape:?} holds {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Graph leaf. Trainable when `requires_grad` is set.
    pub fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        check_shape_len(&shape, values.len())?;
        Ok(Tensor(Rc::new(Node {
            shape,
            values,
            requires_grad,
            grad: RefCell::new(None),
            backward_ran: Cell::new(false),
            visited: Cell::new(0),
            parents: Vec::new(),
            vjp: None,
        })))
    }

    /// Non-trainable leaf.
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape, values, false)
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![], vec![v], false).unwrap()
    }

    /// Rank-1 constant.
    pub fn vector(values: Vec<f64>) -> Tensor {
        Tensor::leaf(vec![values.len()], values, false).unwrap()
    }

    /// Rank-2 constant.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(vec![rows, cols], values, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; n], false).unwrap()
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        vjp: VjpFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Constant subgraph: drop the links, the node is a plain leaf.
            return Tensor::leaf(shape, values, false).unwrap();
        }
        Tensor(Rc::new(Node {
            shape,
            values,
            requires_grad,
            grad: RefCell::new(None),
            backward_ran: Cell::new(false),
            visited: Cell::new(0),
            parents,
            vjp: Some(vjp),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.0.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.values.clone(), false).unwrap()
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode gradient pass from a scalar root.
    ///
    /// Populates `grad` on every reachable `requires_grad` tensor. A second
    /// call on the same root is rejected; rebuild the graph instead.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if self.0.backward_ran.get() {
            return Err(Error::invalid(
                "backward",
                "backward already ran on this root; rebuild the graph before calling again",
            ));
        }
        self.0.backward_ran.set(true);
        if !self.requires_grad() {
            // Constant root: nothing depends on any trainable leaf.
            return Ok(());
        }

        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(vjp) = node.0.vjp.as_ref() else {
                continue;
            };
            let upstream = node
                .0
                .grad
                .borrow()
                .clone()
                .expect("reverse topological order populates every gradient");
            let needed: Vec<bool> = node.0.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = vjp(&upstream, &needed);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.len(), parent.len());
                    parent.accumulate_grad(&pg);
                }
            }
        }
        Ok(())
    }

    /// Iterative DFS postorder over the requires_grad subgraph. Visits
    /// are tracked by a per-thread epoch stamp on the nodes.
    fn topo_order(&self) -> Vec<Tensor> {
        let epoch = TOPO_EPOCH.with(|e| {
            let next = e.get() + 1;
            e.set(next);
            next
        });
        let mut order = Vec::new();
        // (tensor, child cursor)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        self.0.visited.set(epoch);
        while let Some((node, cursor)) = stack.pop() {
            let mut advanced = false;
            for i in cursor..node.0.parents.len() {
                let p = &node.0.parents[i];
                if p.requires_grad() && p.0.visited.get() != epoch {
                    p.0.visited.set(epoch);
                    stack.push((node.clone(), i + 1));
                    stack.push((p.clone(), 0));
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_rejected() {
        assert!(Tensor::leaf(vec![2, 3], vec![0.0; 5], false).is_err());
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::leaf(vec![], vec![3.0], true).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_twice_rejected() {
        let x = Tensor::leaf(vec![], vec![2.0], true).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        let err = y.backward().unwrap_err();
        assert!(err.to_string().contains("already ran"));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn shared_node_accumulates() {
        // y = x*x + x*x : dy/dx = 4x
        let x = Tensor::leaf(vec![], vec![1.5], true).unwrap();
        let a = x.mul(&x).unwrap();
        let y = a.add(&a).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let x = Tensor::leaf(vec![], vec![2.0], true).unwrap();
        let w = Tensor::leaf(vec![], vec![5.0], false).unwrap();
        let y = x.mul(&w).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        assert!(w.grad().is_none());
    }

    #[test]
    fn constant_root_backward_is_noop() {
        let a = Tensor::scalar(1.0);
        let b = a.mul(&a).unwrap();
        b.backward().unwrap();
        assert!(a.grad().is_none());
    }

    #[test]
    fn grad_accumulates_across_graphs() {
        let x = Tensor::leaf(vec![], vec![2.0], true).unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.clear_grad();
        assert!(x.grad().is_none());
    }
}
