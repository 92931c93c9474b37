//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every operation appends a record to the [`Tape`] while it computes its
//! forward value. Records refer to their inputs by [`Var`] handle, so the tape
//! is topologically ordered by construction and [`Tape::backward`] only has to
//! walk it once in reverse.

mod check;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use check::{grad_check, grad_check_module, GradCheckReport, InputReport};
pub use ops::BatchStats;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// Returns one entry per input, `None` meaning "no gradient flows to this
/// input".
pub trait BackwardRule<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn BackwardRule<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    rules_applied: Cell<usize>,
    retained: RefCell<Vec<Var>>,
    relu_signs: Option<RefCell<Vec<bool>>>,
    relu_margin: Cell<f64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            rules_applied: Cell::new(0),
            retained: RefCell::new(Vec::new()),
            relu_signs: None,
            relu_margin: Cell::new(f64::INFINITY),
        }
    }

    /// A tape that also records the sign pattern of every ReLU input. Used by
    /// the gradient checker to detect finite-difference steps that straddle a
    /// kink.
    pub fn with_kink_tracking() -> Self {
        Tape {
            relu_signs: Some(RefCell::new(Vec::new())),
            ..Self::new()
        }
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn BackwardRule<T>>) -> Var {
        self.record(inputs, value, rule)
    }

    pub(crate) fn record(
        &self,
        inputs: &[Var],
        value: Tensor<T>,
        rule: Box<dyn BackwardRule<T>>,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, inputs.to_vec(), Some(rule), requires_grad)
    }

    fn push(
        &self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Option<Box<dyn BackwardRule<T>>>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs,
            rule,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    pub fn is_leaf(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].rule.is_none()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of backward rules run by the last [`Tape::backward`].
    pub fn rules_applied(&self) -> usize {
        self.rules_applied.get()
    }

    /// Keep the gradient of an intermediate value in the result of
    /// [`Tape::backward`]. Leaf gradients are always kept.
    pub fn retain_grad(&self, var: Var) {
        self.retained.borrow_mut().push(var);
    }

    pub(crate) fn record_relu_signs(&self, input: &Tensor<T>) {
        if let Some(signs) = &self.relu_signs {
            signs
                .borrow_mut()
                .extend(input.data().iter().map(|&v| v > T::zero()));
            let nearest = input
                .data()
                .iter()
                .map(|v| v.to_f64_lossy().abs())
                .fold(f64::INFINITY, f64::min);
            self.relu_margin.set(self.relu_margin.get().min(nearest));
        }
    }

    /// Smallest `|x|` over all ReLU inputs recorded so far (kink-tracking
    /// tapes only; infinite otherwise).
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin.get()
    }

    pub fn relu_signs(&self) -> Option<Ref<'_, Vec<bool>>> {
        self.relu_signs.as_ref().map(|s| s.borrow())
    }

    /// Backpropagates from a scalar `loss`. Gradients reaching the same value
    /// from several consumers are summed. A tape can be differentiated once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if !nodes[loss.0].value.is_scalar() && !loss_shape.is_empty() {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }

        let mut keep = vec![false; nodes.len()];
        for v in self.retained.borrow().iter() {
            keep[v.0] = true;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut applied = 0;

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.rule else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = (if keep[id] {
                grads[id].clone()
            } else {
                grads[id].take()
            }) else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|v| nodes[v.0].value.as_ref())
                .collect();
            let input_grads = rule.backward(&inputs, &node.value, &grad);
            applied += 1;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", rule.name());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input.0].value.shape(), "{}", rule.name());
                match &mut grads[input.0] {
                    Some(existing) => existing
                        .add_assign(&g)
                        .expect("gradient shape matches value shape"),
                    slot => *slot = Some(g),
                }
            }
        }
        self.rules_applied.set(applied);

        for (id, node) in nodes.iter().enumerate() {
            if node.rule.is_some() && !keep[id] {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf or retained value; `None` when no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}
