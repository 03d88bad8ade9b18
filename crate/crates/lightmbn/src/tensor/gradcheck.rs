//! Central-difference gradient checking.

use super::tape::{backward, GradTape};
use super::{Tensor, TensorError};

/// Compare the reverse-mode gradient of `f` at `theta` against central
/// differences with step `h`, returning the maximum relative error over
/// the coordinates. The relative error uses a max(|a|, |b|, 1e-8)
/// denominator.
///
/// Central differences carry an intrinsic rounding error of roughly
/// eps·|f|/(2h); coordinate disagreements below that resolution floor are
/// indistinguishable from exact agreement and therefore do not count.
///
/// `f` must be a pure function of its tensor argument (any internal state
/// such as batch-norm running statistics must be reset by the caller's
/// closure on every invocation).
pub fn grad_check<F, E>(f: F, theta: &Tensor, h: f64) -> std::result::Result<f64, E>
where
    F: Fn(&Tensor, &mut GradTape) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let param = Tensor::from_vec(theta.data().to_vec(), theta.shape())?.requiring_grad();
    let mut tape = GradTape::recording();
    let loss = f(&param, &mut tape)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        }
        .into());
    }
    backward(&loss, &tape)?;
    let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);

    let eval = |data: Vec<f64>| -> std::result::Result<f64, E> {
        let t = Tensor::from_vec(data, theta.shape())?;
        let mut tape = GradTape::disabled();
        Ok(f(&t, &mut tape)?.item())
    };

    let base = theta.data().to_vec();
    let mut max_rel = 0.0f64;
    let mut f_scale = loss.item().abs().max(1.0);
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        f_scale = f_scale.max(fp.abs()).max(fm.abs());
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        // resolution floor of the central difference itself
        let noise = 64.0 * f64::EPSILON * f_scale / (2.0 * h);
        if (a - numeric).abs() <= noise {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
