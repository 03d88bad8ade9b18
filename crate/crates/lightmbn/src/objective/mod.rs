//! Loss functions, the combined training objective, the learning-rate
//! schedules, and the optimizer.

mod adam;
mod losses;
mod schedule;


pub use adam::{Adam, OptimizerParams};
pub use losses::{ce_label_smoothing, ms_loss, triplet_batch_hard};
pub use schedule::{lr_schedule, schedule_csv, step_schedule, ScheduleParams};

use thiserror::Error;

use crate::model::EmbeddingBundle;
use crate::tensor::{add, scale, GradTape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch structure violated: {0}")]
    BatchStructure(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("schedule contract violated: epoch {t} outside 1..={total}")]
    EpochOutOfRange { t: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Weights of the identity (CE) and ranking (MS/triplet) halves of the
/// objective. Both default to 0.5.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_ms: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 0.5,
            lambda_ms: 0.5,
        }
    }
}

/// Multi-similarity loss constants. The defaults follow the reference
/// recipe: alpha 2, beta 50, similarity margin 0.5, mining epsilon 0.1.
#[derive(Debug, Clone, Copy)]
pub struct MsLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub mining_eps: f64,
}

impl Default for MsLossParams {
    fn default() -> Self {
        MsLossParams {
            alpha: 2.0,
            beta: 50.0,
            margin: 0.5,
            mining_eps: 0.1,
        }
    }
}

/// Which loss drives the ranking-space embeddings.
#[derive(Debug, Clone, Copy)]
pub enum RankingLoss {
    MultiSimilarity(MsLossParams),
    TripletBatchHard { margin: f64 },
}

/// Per-term values of one combined-objective evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// (term name, raw unweighted value) for each CE and ranking term.
    pub terms: Vec<(String, f64)>,
    pub ce_sum: f64,
    pub rank_sum: f64,
    pub total: f64,
}

/// Combined objective: lambda_ce · sum of CE terms over the identity set
/// plus lambda_ms · sum of ranking terms over the ranking set. Sums, not
/// means, over set members; the weights rescale.
pub fn total_loss(
    tape: &mut GradTape,
    bundle: &EmbeddingBundle,
    labels: &[usize],
    weights: &LossWeights,
    ranking: &RankingLoss,
    eps_ls: f64,
) -> Result<(Tensor, LossBreakdown)> {
    if weights.lambda_ce < 0.0 || weights.lambda_ms < 0.0 {
        return Err(ObjectiveError::InvalidArgument(
            "loss weights must be non-negative".into(),
        ));
    }
    let mut terms = Vec::new();

    let mut ce_total: Option<Tensor> = None;
    for head in bundle.heads() {
        let term = ce_label_smoothing(tape, &head.logits, labels, eps_ls)?;
        terms.push((format!("ce:{}", head.id.name()), term.item()));
        ce_total = Some(match ce_total {
            Some(acc) => add(tape, &acc, &term)?,
            None => term,
        });
    }

    let mut rank_total: Option<Tensor> = None;
    for head in bundle.ranking_heads() {
        let (kind, term) = match ranking {
            RankingLoss::MultiSimilarity(p) => ("ms", ms_loss(tape, &head.pre, labels, p)?),
            RankingLoss::TripletBatchHard { margin } => {
                ("triplet", triplet_batch_hard(tape, &head.pre, labels, *margin)?)
            }
        };
        terms.push((format!("{kind}:{}", head.id.name()), term.item()));
        rank_total = Some(match rank_total {
            Some(acc) => add(tape, &acc, &term)?,
            None => term,
        });
    }

    let ce_sum = ce_total.as_ref().map_or(0.0, Tensor::item);
    let rank_sum = rank_total.as_ref().map_or(0.0, Tensor::item);

    let total = match (ce_total, rank_total) {
        (Some(ce), Some(rk)) => {
            let a = scale(tape, &ce, weights.lambda_ce)?;
            let b = scale(tape, &rk, weights.lambda_ms)?;
            add(tape, &a, &b)?
        }
        (Some(ce), None) => scale(tape, &ce, weights.lambda_ce)?,
        (None, Some(rk)) => scale(tape, &rk, weights.lambda_ms)?,
        (None, None) => {
            return Err(ObjectiveError::InvalidArgument(
                "bundle exposes no heads".into(),
            ))
        }
    };

    let breakdown = LossBreakdown {
        terms,
        ce_sum,
        rank_sum,
        total: total.item(),
    };
    Ok((total, breakdown))
}
