//! Adam optimizer with bias-corrected moment estimates.

use std::collections::HashMap;

use crate::tensor::{Tensor, TensorError};

use super::Result;

/// Adaptive-moment constants: eps 1e-8, beta1 0.9, beta2 0.999.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerParams {
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name. Parameters are replaced with
/// freshly built leaf tensors on every step; their accumulated gradients
/// are consumed (a parameter without a gradient this step is treated as
/// having gradient zero).
pub struct Adam {
    params: OptimizerParams,
    step_count: u64,
    slots: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(params: OptimizerParams) -> Adam {
        Adam {
            params,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over the full parameter list.
    pub fn step(&mut self, named: Vec<(String, &mut Tensor)>, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);

        for (name, param) in named {
            let n = param.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                return Err(TensorError::DimMismatch {
                    op: "adam_step",
                    axes: "moment state vs parameter",
                    detail: format!("{name}: state {} values, parameter {n}", slot.m.len()),
                }
                .into());
            }
            let grad = param.take_grad();
            let grad = grad.as_deref().unwrap_or(&[]);
            let mut data = param.data().to_vec();
            for i in 0..n {
                let g = grad.get(i).copied().unwrap_or(0.0);
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let mhat = slot.m[i] / bias1;
                let vhat = slot.v[i] / bias2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.params.eps);
            }
            let shape = param.shape().to_vec();
            *param = Tensor::from_vec(data, &shape)
                .expect("shape preserved")
                .requiring_grad();
        }
        Ok(())
    }
}
