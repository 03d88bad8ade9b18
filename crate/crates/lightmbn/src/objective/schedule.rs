//! Learning-rate schedules: warmup cosine annealing and the step baseline.

use super::{ObjectiveError, Result};

/// Warmup cosine annealing parameters. The warmup ramps linearly to
/// `lr_peak` over `warmup_epochs`; the remaining epochs follow a half
/// cosine, floored at `lr_floor` so the terminal value stays positive.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleParams {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub lr_peak: f64,
    pub lr_start: f64,
    pub lr_floor: f64,
}

impl ScheduleParams {
    pub fn with_epochs(total_epochs: usize) -> ScheduleParams {
        ScheduleParams {
            total_epochs,
            ..ScheduleParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs <= self.warmup_epochs {
            return Err(ObjectiveError::InvalidArgument(format!(
                "total epochs ({}) must exceed warmup ({})",
                self.total_epochs, self.warmup_epochs
            )));
        }
        if !(self.lr_floor < self.lr_start && self.lr_start < self.lr_peak) {
            return Err(ObjectiveError::InvalidArgument(format!(
                "need lr_floor < lr_start < lr_peak, got {} / {} / {}",
                self.lr_floor, self.lr_start, self.lr_peak
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            total_epochs: 140,
            warmup_epochs: 10,
            lr_peak: 6e-4,
            lr_start: 6e-5,
            lr_floor: 6e-7,
        }
    }
}

/// Learning rate at 1-based epoch `t`: linear ramp to the peak during
/// warmup, then cosine decay floored at `lr_floor`.
pub fn lr_schedule(t: usize, p: &ScheduleParams) -> Result<f64> {
    p.validate()?;
    if t < 1 || t > p.total_epochs {
        return Err(ObjectiveError::EpochOutOfRange {
            t,
            total: p.total_epochs,
        });
    }
    if t <= p.warmup_epochs {
        Ok(p.lr_peak * t as f64 / p.warmup_epochs as f64)
    } else {
        let progress = (t - p.warmup_epochs) as f64 / (p.total_epochs - p.warmup_epochs) as f64;
        let cos = p.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(cos.max(p.lr_floor))
    }
}

/// Constant-then-step baseline: `base_lr` divided by 10 at each epoch in
/// `drop_epochs` (1-based, inclusive).
pub fn step_schedule(t: usize, base_lr: f64, drop_epochs: &[usize]) -> f64 {
    let drops = drop_epochs.iter().filter(|&&e| t >= e).count();
    base_lr * 0.1f64.powi(drops as i32)
}

/// The per-epoch schedule as CSV with an `epoch,lr` header.
pub fn schedule_csv(p: &ScheduleParams) -> Result<String> {
    let mut out = String::from("epoch,lr\n");
    for t in 1..=p.total_epochs {
        out.push_str(&format!("{},{:e}\n", t, lr_schedule(t, p)?));
    }
    Ok(out)
}
