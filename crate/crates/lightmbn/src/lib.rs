//! Desk-scale person re-identification pipeline.
//!
//! A three-branch embedding network (global / channel / part) with BNNeck
//! heads, trained with cross-entropy + multi-similarity losses under a
//! warmup cosine annealing schedule, plus the full retrieval/evaluation
//! stack (CMC and both mAP conventions). Everything runs on a small
//! self-contained f64 tensor engine with reverse-mode gradients.

pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod objective;
pub mod tensor;

/// Forward-pass mode. Train enables batch statistics, drop block and
/// augmentation randomness; Infer uses running statistics and is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
