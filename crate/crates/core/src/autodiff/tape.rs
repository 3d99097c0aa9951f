use std::cell::{Cell, Ref, RefCell};

use super::ops::{backward_node, Op};
use super::params::{BufferId, ParamStore};
use super::{AutodiffError, Tensor};

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Running-statistics update produced by a training-mode batch norm; held on
/// the tape until the trainer commits it.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub buffer: BufferId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records operations in execution order so that `backward` can visit them
/// in exact reverse.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    training: bool,
    recording: bool,
    consumed: Cell<bool>,
    params: RefCell<Vec<(usize, usize)>>,
    stat_updates: RefCell<Vec<StatUpdate>>,
    first_non_finite: RefCell<Option<String>>,
    check_finite: bool,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    /// Training tape: records backward information and uses batch statistics
    /// in batch norm.
    pub fn new() -> Self {
        Self::with_mode(true, true)
    }

    /// Inference: nothing is recorded for backward and batch norm uses the
    /// running statistics.
    pub fn inference() -> Self {
        Self::with_mode(false, false)
    }

    pub fn with_mode(training: bool, recording: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            training,
            recording,
            consumed: Cell::new(false),
            params: RefCell::new(Vec::new()),
            stat_updates: RefCell::new(Vec::new()),
            first_non_finite: RefCell::new(None),
            check_finite: false,
        }
    }

    /// Enables the non-finite watchdog (see [`Tape::check_finite`]).
    pub fn debug_finite(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant leaf (no gradient).
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, self.recording, "leaf")
    }

    /// Binds every parameter of `store` as a differentiable leaf; index `i`
    /// of the result belongs to parameter `i`.
    pub fn bind<'t>(&'t self, store: &ParamStore) -> Vec<Var<'t>> {
        store
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let v = self.leaf(p.value.clone());
                self.params.borrow_mut().push((i, v.id));
                v
            })
            .collect()
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Var<'_> {
        if self.check_finite && !value.is_finite() {
            let mut slot = self.first_non_finite.borrow_mut();
            if slot.is_none() {
                *slot = Some(name.to_string());
            }
        }
        let op = if self.recording && needs_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad: needs_grad && self.recording });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn record_stats(&self, update: StatUpdate) {
        if self.training {
            self.stat_updates.borrow_mut().push(update);
        }
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    /// `Err(NonFiniteDetected)` naming the first op that produced a
    /// non-finite value, when the watchdog is on.
    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match &*self.first_non_finite.borrow() {
            Some(op) => Err(AutodiffError::NonFiniteDetected(op.clone())),
            None => Ok(()),
        }
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate over every use
    /// of a value. The tape can be consumed once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        if self.consumed.replace(true) {
            return Err(AutodiffError::TapeConsumed);
        }
        if !self.recording {
            return Err(AutodiffError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root.needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads, params: self.params.borrow().clone() })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let shape = v.shape();
        self.grads[v.id].as_ref().map(|g| Tensor::new(&shape, g.clone()).expect("gradient shape"))
    }

    /// Per-parameter gradients in store order (zeros where unreachable).
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for &(pi, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (o, v) in out[pi].data_mut().iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn data(&self) -> Vec<f64> {
        self.value().data().to_vec()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }
}
