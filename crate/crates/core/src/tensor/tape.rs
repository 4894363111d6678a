use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the gradient of an op's output to gradients of its inputs, one slot
/// per input, `None` where the input does not need one.
pub(crate) type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

struct Record {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

/// Ordered record of the ops evaluated for one forward pass.
///
/// A tape belongs to a single step: `backward` consumes the recorded rules,
/// so it can run at most once.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Record>>,
    gates: RefCell<Gates>,
}

/// How `relu` picks its active set. `Record` keeps each mask it computes;
/// `Replay` applies previously recorded masks in order, so the recorded
/// forward pass is evaluated on one linear piece of every ReLU.
#[derive(Default)]
pub(crate) enum Gates {
    #[default]
    Free,
    Record(Vec<Rc<Vec<bool>>>),
    Replay { masks: Vec<Rc<Vec<bool>>>, next: usize, broken: bool },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input; its gradient is kept after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_record(Rc::new(value), true, Vec::new(), None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_record(Rc::new(value), false, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an op output. The backward rule is dropped when no input
    /// participates in differentiation.
    pub(crate) fn push<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        backward: impl FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        let rule: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_record(Rc::new(value), requires_grad, ids, rule)
    }

    pub(crate) fn with_gates(gates: Gates) -> Self {
        Tape {
            gates: RefCell::new(gates),
            ..Tape::default()
        }
    }

    pub(crate) fn take_gates(&self) -> Vec<Rc<Vec<bool>>> {
        match self.gates.replace(Gates::Free) {
            Gates::Record(masks) | Gates::Replay { masks, .. } => masks,
            Gates::Free => Vec::new(),
        }
    }

    /// True when a replaying tape met a ReLU that does not line up with the
    /// recorded pass.
    pub(crate) fn replay_broken(&self) -> bool {
        matches!(&*self.gates.borrow(), Gates::Replay { broken: true, .. })
    }

    /// Active set for a ReLU on `input`; `None` means "use the sign of the
    /// input" and nothing is stored.
    pub(crate) fn relu_gate(&self, input: &Tensor) -> Option<Rc<Vec<bool>>> {
        let mut gates = self.gates.borrow_mut();
        match &mut *gates {
            Gates::Free => None,
            Gates::Record(masks) => {
                let mask = Rc::new(input.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>());
                masks.push(Rc::clone(&mask));
                Some(mask)
            }
            Gates::Replay { masks, next, broken } => match masks.get(*next).filter(|m| m.len() == input.numel()) {
                Some(mask) => {
                    *next += 1;
                    Some(Rc::clone(mask))
                }
                None => {
                    *broken = true;
                    None
                }
            },
        }
    }

    fn push_record(
        &self,
        value: Rc<Tensor>,
        requires_grad: bool,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut records = self.records.borrow_mut();
        records.push(Record {
            value,
            requires_grad,
            inputs,
            backward,
            grad: None,
        });
        Var {
            tape: self,
            id: records.len() - 1,
        }
    }

    /// Propagates `d loss / d x` to every differentiable record.
    ///
    /// Records are visited in reverse insertion order, which is a reverse
    /// topological order because an op can only consume earlier records.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        {
            let mut records = self.records.borrow_mut();
            let rec = &mut records[loss.id];
            if rec.value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    rec.value.shape()
                )));
            }
            if !rec.requires_grad {
                return Ok(());
            }
            rec.grad = Some(Tensor::ones(rec.value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let (grad, rule, inputs) = {
                let mut records = self.records.borrow_mut();
                let rec = &mut records[id];
                let Some(rule) = rec.backward.take() else {
                    continue;
                };
                let Some(grad) = rec.grad.take() else {
                    continue;
                };
                (grad, rule, rec.inputs.clone())
            };
            let input_grads = rule(&grad);
            debug_assert_eq!(input_grads.len(), inputs.len());
            let mut records = self.records.borrow_mut();
            for (input, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let rec = &mut records[input];
                if !rec.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), rec.value.shape());
                match rec.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => rec.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated on `var` by the last `backward`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.records.borrow()[var.id].grad.clone()
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.records.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.records.borrow()[id].requires_grad
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
