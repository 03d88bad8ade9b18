//! Horizontal drop block: zeroes the most-activated band of rows so the
//! network is forced to attend to less discriminative regions.

use std::sync::Arc;

use crate::tensor::{mask_mul, GradTape, Tensor};
use crate::Mode;

use super::{ModelError, Result};

/// Per sample, zero a contiguous band of ceil(ratio·H) rows centered on
/// the row with the highest channel-and-width-summed absolute activation,
/// clamped to the image bounds. Identity at inference or when the ratio
/// is 0. The mask is treated as a constant in the backward pass.
pub fn drop_block(tape: &mut GradTape, x: &Tensor, ratio: f64, mode: Mode) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ModelError::Config(format!(
            "drop ratio must lie in [0,1], got {ratio}"
        )));
    }
    if x.shape().len() != 4 {
        return Err(ModelError::InputShape {
            expected: "N×C×H×W".into(),
            got: x.shape().to_vec(),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let band = (ratio * h as f64).ceil() as usize;
    if mode == Mode::Infer || band == 0 {
        return Ok(x.clone());
    }
    let band = band.min(h);

    let mut mask = vec![1.0; n * c * h * w];
    for s in 0..n {
        // row activation: sum of |x| over channels and width
        let mut act = vec![0.0; h];
        for ci in 0..c {
            for (row, a) in act.iter_mut().enumerate() {
                let base = ((s * c + ci) * h + row) * w;
                *a += x.data()[base..base + w].iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        let peak = act
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let start = peak.saturating_sub(band / 2).min(h - band);
        for ci in 0..c {
            for row in start..start + band {
                let base = ((s * c + ci) * h + row) * w;
                mask[base..base + w].fill(0.0);
            }
        }
    }
    Ok(mask_mul(tape, x, Arc::new(mask))?)
}

/// The band actually zeroed for a given activation peak: (start, length).
pub fn band_bounds(peak: usize, h: usize, ratio: f64) -> (usize, usize) {
    let band = ((ratio * h as f64).ceil() as usize).min(h);
    if band == 0 {
        return (0, 0);
    }
    (peak.saturating_sub(band / 2).min(h - band), band)
}
