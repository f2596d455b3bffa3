//! Dense row-major tensor with a reverse-mode differentiation tape.
//!
//! Every operation that consumes at least one *tracked* tensor (one that
//! requires gradient itself or descends from one) records a node holding the
//! operation's backward rule and its input handles. [`Tensor::backward`]
//! replays the recorded graph in reverse topological order. Tensors produced
//! from untracked inputs carry no node, so inference builds no graph at all.
//!
//! A graph is single-writer: one training step builds and consumes one tape.
//! Operations may parallelize internally over disjoint output regions, which
//! keeps results bit-deterministic regardless of thread count.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

/// Context handed to an operation's backward rule.
pub struct BackwardContext<'a, T: Scalar> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad_out: &'a [T],
    pub out_shape: &'a [usize],
    pub out_data: &'a [T],
    pub inputs: &'a [Tensor<T>],
    /// Which inputs actually need a gradient; rules may skip the rest.
    pub needs: &'a [bool],
}

/// Backward rule of a recorded operation. Implementations return one
/// gradient buffer per input (`None` for inputs that need none).
pub trait TensorOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>>;
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Box<dyn TensorOp<T>>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Shared handle to an immutable tensor value. Cloning is cheap.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field(
                "op",
                &self
                    .inner
                    .node
                    .as_ref()
                    .map(|n| n.op.name())
                    .unwrap_or("leaf"),
            )
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Constant tensor (no gradient participation).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradient during backward passes.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::make(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::make(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::make(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::cast_f32(x)).collect())
    }

    /// Result of an operation; records a node only when an input is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: Box<dyn TensorOp<T>>,
        inputs: Vec<Tensor<T>>,
    ) -> Self {
        let tracked = inputs.iter().any(Tensor::is_tracked);
        let node = tracked.then_some(Node { op, inputs });
        Self::make(shape, data, false, node)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when the tensor participates in the current graph.
    pub fn is_tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Accumulated gradient, present after a backward pass reached this
    /// tensor (requires_grad tensors only).
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::make(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            false,
            None,
        )
    }

    pub fn op_name(&self) -> &'static str {
        self.inner
            .node
            .as_ref()
            .map(|n| n.op.name())
            .unwrap_or("leaf")
    }

    fn accumulate_grad(&self, add: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi += *ai;
                }
            }
            None => *slot = Some(add.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` tensor reachable from the loss; repeated calls without
    /// [`Tensor::zero_grad`] keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.is_tracked() {
            // Constant loss: nothing depends on it; nothing to write.
            return Ok(());
        }

        // Iterative post-order DFS; reversed it yields a topological order
        // (every consumer visited before its producers).
        let order = self.topo_order();

        let mut flows: std::collections::HashMap<usize, Vec<T>> = std::collections::HashMap::new();
        flows.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(grad_out) = flows.remove(&t.id()) else {
                continue;
            };
            if t.requires_grad() {
                t.accumulate_grad(&grad_out);
            }
            if let Some(node) = t.inner.node.as_ref() {
                let needs: Vec<bool> = node.inputs.iter().map(Tensor::is_tracked).collect();
                let ctx = BackwardContext {
                    grad_out: &grad_out,
                    out_shape: t.shape(),
                    out_data: t.data(),
                    inputs: &node.inputs,
                    needs: &needs,
                };
                let grads = node.op.backward(&ctx);
                debug_assert_eq!(grads.len(), node.inputs.len());
                for (input, grad) in node.inputs.iter().zip(grads) {
                    let Some(grad) = grad else { continue };
                    debug_assert_eq!(grad.len(), input.numel());
                    match flows.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += *g;
                            }
                        }
                        None => {
                            flows.insert(input.id(), grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: std::collections::HashSet<usize> = std::collections::HashSet::new();
        // (tensor, next child index) explicit stack to avoid recursion limits.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child)) = stack.pop() {
            let n_children = t.inner.node.as_ref().map(|n| n.inputs.len()).unwrap_or(0);
            if child < n_children {
                stack.push((t.clone(), child + 1));
                let input = t.inner.node.as_ref().unwrap().inputs[child].clone();
                if input.is_tracked() && visited.insert(input.id()) {
                    stack.push((input, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }

    /// Walk the graph below `self` in creation order and report the first
    /// tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut order = self.topo_order();
        order.sort_by_key(|t| t.id());
        for t in &order {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Some(format!("{}#{} shape {:?}", t.op_name(), t.id(), t.shape()));
            }
        }
        None
    }
}

/// Max relative disagreement between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`:
/// `max_i |analytic_i - central_i| / (|analytic_i| + |central_i| + 1e-12)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    assert!(eps > T::zero(), "finite_diff_check: eps must be positive");
    let leaf = Tensor::param(x.shape(), x.data().to_vec())?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let tiny = T::cast(1e-12);
    let mut worst = T::zero();
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&Tensor::new(x.shape(), probe.clone())?)?.item();
        probe[i] = orig - eps;
        let minus = f(&Tensor::new(x.shape(), probe.clone())?)?.item();
        probe[i] = orig;
        let central = (plus - minus) / (eps + eps);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + tiny);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
