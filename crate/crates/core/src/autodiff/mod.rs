//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] creates [`Var`]s: leaves via [`Tape::param`] / [`Tape::constant`]
//! and intermediates via the operation methods in [`ops`]. Every operation
//! with at least one gradient-requiring input appends a record, so the record
//! list is in execution (topological) order. [`Tape::backward`] replays it in
//! reverse exactly once.
//!
//! A tape built with [`Tape::inference`] records nothing; intermediates are
//! freed as soon as their `Var`s drop.

mod ops;

pub use ops::unit_pair;

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::kernels::Padding;

/// Handle to a value produced on a [`Tape`].
#[derive(Debug, Clone)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Takes the value out, cloning only if other handles still share it.
    pub fn into_tensor(self) -> Tensor {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Input {
    id: usize,
    requires_grad: bool,
}

impl From<&Var> for Input {
    fn from(v: &Var) -> Self {
        Self {
            id: v.id,
            requires_grad: v.requires_grad,
        }
    }
}

#[derive(Debug)]
struct Record {
    out: usize,
    op: ops::Op,
}

/// Ordered log of differentiable operations.
#[derive(Debug)]
pub struct Tape {
    records: Vec<Record>,
    next_id: usize,
    recording: bool,
    consumed: bool,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            next_id: 0,
            recording: true,
            consumed: false,
            grads: Vec::new(),
        }
    }

    /// A tape that never records: every `Var` it produces is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Registers a leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.leaf(value, requires_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.fresh_id();
        Var {
            id,
            value: Rc::new(value),
            requires_grad,
        }
    }

    fn fresh_id(&mut self) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Wraps a computed value, recording `op` when any input needs a gradient.
    fn push(&mut self, value: Tensor, requires_grad: bool, op: impl FnOnce() -> ops::Op) -> Var {
        self.push_rc(Rc::new(value), requires_grad, op)
    }

    fn push_rc(&mut self, value: Rc<Tensor>, requires_grad: bool, op: impl FnOnce() -> ops::Op) -> Var {
        let id = self.fresh_id();
        let requires_grad = requires_grad && self.recording;
        if requires_grad {
            self.records.push(Record { out: id, op: op() });
        }
        Var {
            id,
            value,
            requires_grad,
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating gradients into every
    /// gradient-requiring leaf. The tape is consumed: recorded intermediates
    /// are released and a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        if self.records.is_empty() {
            return Err(Error::EmptyTape);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.next_id];
        if loss.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        let records = core::mem::take(&mut self.records);
        for record in records.into_iter().rev() {
            let Some(gout) = grads[record.out].take() else {
                continue;
            };
            record.op.backward(&gout, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient accumulated for `var` by the last backward pass; zeros when
    /// no path connects it to the loss. Only leaves retain gradients.
    pub fn grad(&self, var: &Var) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(var.shape().to_vec(), g.clone()),
            None => Tensor::zeros(var.shape()),
        }
    }

    /// Moves the gradient for `var` out of the tape.
    pub fn take_grad(&mut self, var: &Var) -> Tensor {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => Tensor::from_parts(var.shape().to_vec(), g),
            None => Tensor::zeros(var.shape()),
        }
    }
}

/// Gradient buffer for `input`, zero-filled on first use; `None` when the
/// input does not require a gradient.
pub(crate) fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f32>>],
    input: Input,
    len: usize,
) -> Option<&'a mut Vec<f32>> {
    if !input.requires_grad {
        return None;
    }
    Some(grads[input.id].get_or_insert_with(|| vec![0.0; len]))
}

#[cfg(test)]
mod tests;
