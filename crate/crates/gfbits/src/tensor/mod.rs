//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array (row-major). Operations
//! on tensors build a tape of [`Node`]s eagerly whenever an input requires
//! gradients; [`Tensor::backward`] walks that tape once in reverse
//! topological order and accumulates gradients into every tensor that
//! requires them. The tape is dropped with the tensors that reference it.
//!
//! Two backward rule families exist: the standard analytic rules for the
//! built-in ops, and the straight-through rule, which passes the upstream
//! gradient unchanged regardless of the forward map. Custom ops (used by
//! the quantizers) plug in through [`CustomVjp`].

mod ops;

pub use ops::CustomVjp;
pub(crate) use ops::Rule;

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `backward` invocations on this thread. Used to assert that
/// gradient-free phases really perform no backpropagation.
pub fn backward_call_count() -> u64 {
    BACKWARD_CALLS.with(|c| c.get())
}

pub(crate) struct Node {
    pub(crate) rule: Rule,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Dense n-dimensional `f64` tensor, cheap to clone (shared storage).
/// Data is immutable after construction; only the gradient accumulator
/// mutates.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Builds a tensor from a shape and row-major values. Rejects shape/value
/// length mismatches and non-finite values.
pub fn tensor_of(shape: &[usize], values: &[f64]) -> Result<Tensor> {
    Tensor::new(shape, values)
}

impl Tensor {
    /// Leaf tensor without gradient tracking.
    pub fn new(shape: &[usize], values: &[f64]) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite input value {v}")));
        }
        Ok(Self::leaf(shape.to_vec(), values.to_vec(), false))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn parameter(shape: &[usize], values: &[f64]) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        Ok(Self::leaf(
            t.inner.shape.clone(),
            t.inner.data.clone(),
            true,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![1], vec![v], false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        rule: Rule,
        inputs: Vec<Tensor>,
    ) -> Tensor {
        let requires_grad = inputs.iter().any(|t| t.inner.requires_grad);
        if !requires_grad {
            // No grad flows through here; skip the tape node entirely.
            return Self::leaf(shape, data, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad: true,
                grad: RefCell::new(None),
                node: Some(Node { rule, inputs }),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a scalar, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replaces the data of a leaf parameter, returning a fresh handle.
    /// Grad and tape are not carried over.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != self.len() {
            return Err(Error::Shape("with_data length mismatch".into()));
        }
        Ok(Self::leaf(
            self.inner.shape.clone(),
            data,
            self.inner.requires_grad,
        ))
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode gradient pass from a scalar loss.
    ///
    /// Gradients are *accumulated* into every tensor with
    /// `requires_grad`; calling backward twice without clearing doubles
    /// them. Each tape node is visited exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, shape is {:?}",
                self.shape()
            )));
        }
        if self.inner.node.is_none() {
            return Err(Error::Usage(
                "backward called on a tensor not produced by taped ops".into(),
            ));
        }
        BACKWARD_CALLS.with(|c| c.set(c.get() + 1));

        // Post-order DFS; `order` ends with `self`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    if input.inner.requires_grad && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut local: HashMap<usize, Vec<f64>> = HashMap::new();
        local.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(node) = &t.inner.node else { continue };
            let Some(upstream) = local.get(&t.key()).cloned() else {
                continue;
            };
            let input_grads = node.rule.backward(&upstream, &node.inputs, t.shape());
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.inner.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), input.len());
                let slot = local.entry(input.key()).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }

        // Fold the pass-local gradients into the persistent accumulators.
        // Leaves are part of `order`: the DFS pushes every reachable
        // tensor that requires gradients.
        for t in &order {
            Self::accumulate(t, &local);
        }
        Ok(())
    }

    fn accumulate(t: &Tensor, local: &HashMap<usize, Vec<f64>>) {
        if !t.inner.requires_grad {
            return;
        }
        let Some(g) = local.get(&t.key()) else { return };
        let mut slot = t.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.clone()),
        }
    }
}

/// Central-difference gradient of a tensor-to-scalar map, element by
/// element. The independent oracle for every gradient test in the crate.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Domain("eps must be positive".into()));
    }
    let mut grad = vec![0.0; x.len()];
    let base = x.data().to_vec();
    for i in 0..x.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::new(x.shape(), &plus)?)?;
        let fm = f(&Tensor::new(x.shape(), &minus)?)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape(), &grad)
}

#[cfg(test)]
mod tests;
