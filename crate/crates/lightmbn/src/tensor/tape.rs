//! Gradient tape: ordered record of executed ops, replayed in reverse to
//! accumulate adjoints.

use std::collections::HashMap;

use super::{Result, Tensor, TensorError, TensorId};

/// One recorded operation. Implementations hold handles to their input and
/// output tensors plus whatever context the adjoint needs.
pub trait TapeOp: Send {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<&Tensor>;
    fn output(&self) -> &Tensor;
    /// Gradients with respect to each input, aligned with `inputs()`.
    /// `None` marks an input that does not receive a gradient.
    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Ordered op record. Ops are pushed in execution order, so the record is
/// topological: every op's inputs were produced earlier.
pub struct GradTape {
    recording: bool,
    ops: Vec<Box<dyn TapeOp>>,
}

impl GradTape {
    /// A tape that records ops for backward().
    pub fn recording() -> GradTape {
        GradTape {
            recording: true,
            ops: Vec::new(),
        }
    }

    /// A tape that records nothing; forward math is unchanged.
    pub fn disabled() -> GradTape {
        GradTape {
            recording: false,
            ops: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn push(&mut self, op: Box<dyn TapeOp>) {
        debug_assert!(self.recording);
        self.ops.push(op);
    }
}

/// Reverse-mode sweep: seeds the scalar `loss` with 1.0 and visits the tape
/// once in reverse, accumulating adjoints. Gradients of requires-grad leaf
/// tensors land in their grad slots; repeated calls without zeroing
/// accumulate additively.
pub fn backward(loss: &Tensor, tape: &GradTape) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if loss.is_leaf() {
        if loss.requires_grad() {
            loss.accumulate_grad(&[1.0]);
        }
        return Ok(());
    }

    // Adjoints of intermediate (op-produced) tensors, dropped as soon as
    // the producing op has consumed them to bound peak memory.
    let mut pending: HashMap<TensorId, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);

    for op in tape.ops.iter().rev() {
        let grad_out = match pending.remove(&op.output().id()) {
            Some(g) => g,
            None => continue,
        };
        let grads = op.grad_inputs(&grad_out);
        let inputs = op.inputs();
        debug_assert_eq!(grads.len(), inputs.len(), "{}: adjoint arity", op.name());
        for (input, grad) in inputs.into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            debug_assert_eq!(grad.len(), input.numel(), "{}: adjoint shape", op.name());
            if input.is_leaf() {
                if input.requires_grad() {
                    input.accumulate_grad(&grad);
                }
            } else if input.requires_grad() {
                match pending.get_mut(&input.id()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&grad) {
                            *a += b;
                        }
                    }
                    None => {
                        pending.insert(input.id(), grad);
                    }
                }
            }
        }
    }
    Ok(())
}
