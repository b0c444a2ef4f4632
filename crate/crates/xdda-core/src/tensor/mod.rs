//! Dense f64 tensors with tape-free reverse-mode automatic differentiation.
//!
//! Each op records its parents and a backward closure on the output node, so
//! the graph lives in the tensors themselves and is dropped with them: no
//! retention across training steps. Gradients accumulate (never overwrite)
//! during a single backward pass; a second backward over parameters whose
//! grads were not reset is a contract error.
//!
//! Everything is f64 and single-threaded per graph; outputs are bit-identical
//! for an identical op sequence on identical inputs.

mod conv;
pub mod gradcheck;
mod ops;

pub use conv::PixelRect;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: parameter gradients were not reset since the previous backward pass")]
    GradNotReset,
    #[error("parameter name sets differ: {0}")]
    ParameterMismatch(String),
}

/// Backward closure: receives the output gradient; accumulates into parents.
type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data.borrow())
            .finish()
    }
}

impl Tensor {
    /// New leaf tensor. Errors if the element count does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape holds {numel} elements but data has {}", data.len()),
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, requires_grad))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![1.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward: if requires_grad { Some(backward) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none() && self.0.parents.is_empty()
    }

    /// Copy of the node's values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        debug_assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.0.data.borrow()[idx]
    }

    /// Copy of the accumulated gradient, if a backward pass has run.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, no graph history, no gradient.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    /// Mutate the underlying values in place (optimizer / EMA entry point).
    /// Only valid on leaves; the graph built on old values must be dropped.
    pub fn apply_update(&self, f: impl FnOnce(&mut [f64])) {
        debug_assert!(self.is_leaf(), "apply_update on non-leaf tensor");
        f(&mut self.0.data.borrow_mut());
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode backward from a scalar loss.
    ///
    /// Populates `grad` on every reachable tensor that requires gradients,
    /// summing contributions from all paths. Errors if the loss is not a
    /// scalar, or if any reachable gradient-bearing leaf still carries a
    /// gradient from a previous pass (missing `zero_grad`).
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.0.shape.clone(),
            });
        }
        let order = self.topo_order();
        for t in &order {
            if t.0.backward.is_none() && t.0.requires_grad && t.0.grad.borrow().is_some() {
                return Err(TensorError::GradNotReset);
            }
        }
        self.accumulate_grad(&[1.0]);
        // `order` is post-order (parents before children), so reversed it
        // visits each node after all of its consumers.
        for t in order.iter().rev() {
            if !t.0.requires_grad {
                continue;
            }
            if let Some(back) = &t.0.backward {
                let grad = t.0.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    back(g);
                }
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over parents. Deterministic: traversal order
    /// depends only on graph structure.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        // (tensor, child_cursor)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.0.parents.len() {
                let parent = node.0.parents[cursor].clone();
                stack.push((node, cursor + 1));
                if visited.insert(Rc::as_ptr(&parent.0)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Named learnable tensor. The gradient-bearing unit of every model.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        Self::with_grad_flag(name, shape, data, true)
    }

    /// Build with an explicit gradient flag; frozen (teacher-side) parameters
    /// never receive gradients.
    pub fn with_grad_flag(
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Self, TensorError> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::from_vec(shape, data, requires_grad)?,
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Parameter {
            name: name.into(),
            tensor: Tensor::from_vec(shape, vec![0.0; numel], true).expect("consistent shape"),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tensor.to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    pub fn set_values(&self, values: &[f64]) {
        self.tensor.apply_update(|d| d.copy_from_slice(values));
    }

    pub fn apply_update(&self, f: impl FnOnce(&mut [f64])) {
        self.tensor.apply_update(f);
    }
}
