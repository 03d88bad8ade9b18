//! Minimal dense-tensor engine: row-major f64 storage, the forward
//! operators the model needs, and reverse-mode gradients for all of them.

mod gradcheck;
mod ops;
mod tape;

#[cfg(test)]
mod tests;

pub use gradcheck::grad_check;
pub use ops::{
    add, batch_norm, conv2d, linear, mask_mul, mul, narrow, pool2d, relu, reshape, scale,
    sum_all, PoolMode, RunningStats,
};
pub use tape::{backward, GradTape, TapeOp};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    DimMismatch {
        op: &'static str,
        axes: &'static str,
        detail: String,
    },
    #[error("{op}: expected {expected} values for shape {shape:?}, got {got}")]
    ElementCount {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("batch_norm: degenerate batch (N = {n}) — train mode needs N >= 2")]
    DegenerateBatch { n: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub type TensorId = u64;

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    leaf: bool,
    grad: RwLock<Option<Vec<f64>>>,
}

/// An n-dimensional row-major array of f64 values.
///
/// Tensors are immutable after construction except for gradient
/// accumulation, so cloning a handle is cheap and independent graphs can
/// be evaluated by parallel workers.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, leaf: bool) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                leaf,
                grad: RwLock::new(None),
            }),
        }
    }

    /// Create a leaf tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ElementCount {
                op: "from_vec",
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Self::build(vec![0.0; n], shape.to_vec(), false, true)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Self::build(vec![value; n], shape.to_vec(), false, true)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![value], vec![], false, true)
    }

    /// Leaf tensor with values drawn from a zero-mean normal of the given
    /// standard deviation.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        use rand_distr::Distribution;
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite and positive");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Self::build(data, shape.to_vec(), false, true)
    }

    /// Mark this tensor as requiring gradients. Only meaningful for leaves.
    pub fn requiring_grad(self) -> Tensor {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => Tensor {
                inner: Arc::new(Inner {
                    requires_grad: true,
                    ..inner
                }),
            },
            Err(shared) => Tensor {
                inner: Arc::new(Inner {
                    id: fresh_id(),
                    shape: shared.shape.clone(),
                    data: shared.data.clone(),
                    requires_grad: true,
                    leaf: true,
                    grad: RwLock::new(None),
                }),
            },
        }
    }

    /// Output of a tape op (non-leaf).
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "op produced non-finite values"
        );
        Self::build(data, shape, requires_grad, false)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.read().expect("grad lock").clone()
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.write().expect("grad lock").take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().expect("grad lock") = None;
    }

    /// Add `g` into the gradient slot. Repeated calls accumulate.
    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.write().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}
