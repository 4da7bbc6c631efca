use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// Computes one gradient per parent from the output gradient, the parent
/// values and the output value.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
struct MacCounter {
    component: String,
    counts: BTreeMap<String, u64>,
}

struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
    consumed: bool,
    counter: Option<MacCounter>,
}

/// Ordered record of executed primitives.
///
/// A tape belongs to one thread. Nodes are appended in execution order and
/// `backward` walks them in strict reverse order exactly once.
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records adjoints for every op touching a gradient leaf.
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                recording: true,
                consumed: false,
                counter: None,
            }),
        }
    }

    /// A forward-only tape. Leaves never require gradients.
    pub fn inference() -> Self {
        let tape = Tape::new();
        tape.inner.borrow_mut().recording = false;
        tape
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Start attributing multiply-accumulate counts of matmul and conv
    /// primitives to named components.
    pub fn enable_mac_counting(&self) {
        self.inner.borrow_mut().counter = Some(MacCounter::default());
    }

    /// Run `f` with MACs attributed to `component`, restoring the previous
    /// component afterwards.
    pub fn with_component<R>(&self, component: &str, f: impl FnOnce() -> R) -> R {
        let previous = {
            let mut inner = self.inner.borrow_mut();
            match inner.counter.as_mut() {
                Some(c) => Some(std::mem::replace(&mut c.component, component.to_string())),
                None => None,
            }
        };
        let out = f();
        if let Some(prev) = previous {
            if let Some(c) = self.inner.borrow_mut().counter.as_mut() {
                c.component = prev;
            }
        }
        out
    }

    /// MAC totals per component, or `None` if counting was never enabled.
    pub fn mac_counts(&self) -> Option<BTreeMap<String, u64>> {
        self.inner.borrow().counter.as_ref().map(|c| c.counts.clone())
    }

    pub(crate) fn count_macs(&self, macs: u64) {
        if let Some(c) = self.inner.borrow_mut().counter.as_mut() {
            *c.counts.entry(c.component.clone()).or_insert(0) += macs;
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf; `requires_grad` is ignored on an inference tape.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.recording;
        inner.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub(crate) fn push<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad =
            inner.recording && parents.iter().any(|p| inner.nodes[p.id].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        inner.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let inner = self.inner.borrow();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
        f(&vals)
    }

    /// Populate gradients for every node that `loss` depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::AlreadyConsumed);
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(TensorError::Detached);
        }
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(inner.nodes[loss.id].value.shape()));

        for i in (0..=loss.id).rev() {
            let node = &inner.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[i].as_ref() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &inner.nodes[p].value).collect();
            let parent_grads = backward(grad_out, &parent_vals, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if !inner.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), inner.nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p] = Some(g),
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        inner.grads = grads;
        inner.consumed = true;
        Ok(())
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.inner.borrow().grads.get(var.id).cloned().flatten()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, |v| v.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn item(&self) -> Option<f64> {
        self.tape.with_value(self.id, |v| v.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
