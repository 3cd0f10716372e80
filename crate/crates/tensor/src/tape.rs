use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::{Result, Tensor, TensorError};

/// Vector-Jacobian product rule of a recorded operation.
///
/// `inputs` are the parent values in recording order, `output` the value the
/// op produced and `grad` the gradient of the loss with respect to `output`.
/// Implementations return one entry per parent; entries whose `needs` flag is
/// false may be `None` and are ignored.
pub trait Backward: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    grad: Option<Tensor>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids increase in recording order, so the graph is acyclic by
/// construction and reverse id order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves with `requires_grad` receive a gradient on backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Arc::new(value),
            requires_grad,
            grad: None,
            parents: Vec::new(),
            op: None,
        })
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records the result of an operation over `parents`.
    ///
    /// The backward rule is kept only when some parent requires a gradient.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        op: impl Backward + 'static,
    ) -> Var<'t> {
        let requires_grad = {
            let inner = self.inner.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "var from another tape");
                inner.nodes[p.id].requires_grad
            })
        };
        self.push(Node {
            value: Arc::new(value),
            requires_grad,
            grad: None,
            parents: parents.iter().map(|p| p.id).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward>),
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Propagates gradients from a scalar `loss` to every leaf that requires one.
    ///
    /// Interior gradients are released once propagated. A second call before
    /// [`Tape::reset`] fails with [`TensorError::BackwardConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        if !inner.nodes[loss.id].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(&loss_shape));
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    grads[id] = Some(grad);
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| inner.nodes[p].value.as_ref())
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| inner.nodes[p].requires_grad)
                .collect();
            let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
            for ((&pid, need), pg) in node.parents.iter().zip(needs).zip(parent_grads) {
                let Some(pg) = pg.filter(|_| need) else {
                    continue;
                };
                debug_assert_eq!(
                    pg.shape(),
                    inner.nodes[pid].value.shape(),
                    "{} produced a misshapen gradient",
                    op.name()
                );
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for (node, grad) in inner.nodes.iter_mut().zip(grads) {
            if node.op.is_none() && node.requires_grad {
                node.grad = grad;
            }
        }
        Ok(())
    }

    /// Drops every recorded node so the tape can record the next step.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient left by [`Tape::backward`] on a leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// A constant copy of this value; nothing flows back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    /// Convenience for scalar results.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
