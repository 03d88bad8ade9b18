use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::*;
use crate::Mode;

// ---------------------------------------------------------------------------
// naive oracles, independent of the op implementations

#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (f, kh, kw): (usize, usize, usize),
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[fi]);
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wgt[((fi * c + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

fn naive_pool(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (wh, ww): (usize, usize),
    max: bool,
) -> Vec<f64> {
    let (oh, ow) = (h / wh, w / ww);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for dy in 0..wh {
                    for dx in 0..ww {
                        vals.push(x[nc * h * w + (oy * wh + dy) * w + (ox * ww + dx)]);
                    }
                }
                out[(nc * oh + oy) * ow + ox] = if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
            }
        }
    }
    out
}

fn randn_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    use rand_distr::Distribution;
    let d = rand_distr::Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn sq_sum(tape: &mut GradTape, y: &Tensor) -> Result<Tensor> {
    let m = mul(tape, y, y)?;
    sum_all(tape, &m)
}

/// sum(r ⊙ (y + y⊙y)) for a fixed weight tensor r.
fn weighted_sq_sum(tape: &mut GradTape, y: &Tensor, r: &Tensor) -> Result<Tensor> {
    let sq = mul(tape, y, y)?;
    let lin = add(tape, y, &sq)?;
    let w = mul(tape, &lin, r)?;
    sum_all(tape, &w)
}

// ---------------------------------------------------------------------------
// conv2d

#[test]
fn conv_identity_one_by_one_kernels() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x = Tensor::from_vec(randn_vec(&mut rng, 48), &[1, 3, 4, 4]).unwrap();
    // w[f][c] = 1 iff f == c
    let mut w = vec![0.0; 9];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let w = Tensor::from_vec(w, &[3, 3, 1, 1]).unwrap();
    let mut tape = GradTape::disabled();
    let y = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_all_ones_sums_window() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let mut tape = GradTape::disabled();
    let y = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_abs_diff_eq!(y.item(), 9.0, epsilon = 1e-15);
}

#[test]
fn conv_matches_naive_oracle_strided_padded() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let x = Tensor::from_vec(randn_vec(&mut rng, 2 * 4 * 8 * 8), &[2, 4, 8, 8]).unwrap();
    let w = Tensor::from_vec(randn_vec(&mut rng, 6 * 4 * 3 * 3), &[6, 4, 3, 3]).unwrap();
    let b = Tensor::from_vec(randn_vec(&mut rng, 6), &[6]).unwrap();
    let mut tape = GradTape::disabled();
    let y = conv2d(&mut tape, &x, &w, Some(&b), 2, 1).unwrap();
    assert_eq!(y.shape(), &[2, 6, 4, 4]);
    let (oracle, _) = naive_conv2d(
        x.data(),
        (2, 4, 8, 8),
        w.data(),
        (6, 3, 3),
        Some(b.data()),
        2,
        1,
    );
    for (a, b) in y.data().iter().zip(&oracle) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn conv_channel_mismatch_names_axes() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 4, 1, 1]);
    let mut tape = GradTape::disabled();
    let err = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap_err();
    match err {
        TensorError::DimMismatch { axes, .. } => {
            assert!(axes.contains("channels"), "axes = {axes}");
        }
        other => panic!("expected DimMismatch, got {other:?}"),
    }
}

#[test]
fn conv_forward_oracle_random_shapes() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..3usize);
        let c = rng.random_range(1..4usize);
        let f = rng.random_range(1..4usize);
        let k = rng.random_range(1..4usize);
        let stride = rng.random_range(1..3usize);
        let pad = rng.random_range(0..2usize);
        let h = rng.random_range(k..k + 5);
        let w = rng.random_range(k..k + 5);
        let x = Tensor::from_vec(randn_vec(&mut rng, n * c * h * w), &[n, c, h, w]).unwrap();
        let wgt = Tensor::from_vec(randn_vec(&mut rng, f * c * k * k), &[f, c, k, k]).unwrap();
        let mut tape = GradTape::disabled();
        let y = conv2d(&mut tape, &x, &wgt, None, stride, pad).unwrap();
        let (oracle, (oh, ow)) =
            naive_conv2d(x.data(), (n, c, h, w), wgt.data(), (f, k, k), None, stride, pad);
        assert_eq!(y.shape(), &[n, f, oh, ow]);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    for trial in 0..100 {
        let stride = 1 + trial % 2;
        let pad = trial % 2;
        let x = Tensor::from_vec(randn_vec(&mut rng, 2 * 2 * 5 * 4), &[2, 2, 5, 4]).unwrap();
        let w0 = Tensor::from_vec(randn_vec(&mut rng, 3 * 2 * 3 * 3), &[3, 2, 3, 3]).unwrap();
        let b0 = Tensor::from_vec(randn_vec(&mut rng, 3), &[3]).unwrap();
        // check d/dx with w fixed
        let err = grad_check(
            |t, tape| {
                let y = conv2d(tape, t, &w0, Some(&b0), stride, pad)?;
                sq_sum(tape, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dx rel err {err} (trial {trial})");
        // check d/dw with x fixed
        let err = grad_check(
            |t, tape| {
                let y = conv2d(tape, &x, t, Some(&b0), stride, pad)?;
                sq_sum(tape, &y)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dw rel err {err} (trial {trial})");
    }
}

// ---------------------------------------------------------------------------
// batch_norm

#[test]
fn bn_train_normalizes_per_channel() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x = Tensor::from_vec(randn_vec(&mut rng, 6 * 3 * 4 * 2), &[6, 3, 4, 2]).unwrap();
    let gamma = Tensor::full(&[3], 1.0);
    let beta = Tensor::zeros(&[3]);
    let mut running = RunningStats::new(3);
    let mut tape = GradTape::disabled();
    let eps = 1e-5;
    let y = batch_norm(&mut tape, &x, &gamma, &beta, &mut running, Mode::Train, eps, 0.1).unwrap();
    let m = 6 * 4 * 2;
    for c in 0..3 {
        let mut mean = 0.0;
        let mut var = 0.0;
        for s in 0..6 {
            for j in 0..8 {
                mean += y.data()[(s * 3 + c) * 8 + j];
            }
        }
        mean /= m as f64;
        for s in 0..6 {
            for j in 0..8 {
                let d = y.data()[(s * 3 + c) * 8 + j] - mean;
                var += d * d;
            }
        }
        var /= m as f64;
        assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
        // the eps in the denominator shrinks the variance slightly below 1
        assert_abs_diff_eq!(var, 1.0 / (1.0 + eps / var_of_channel(&x, c)), epsilon = 1e-6);
    }
}

fn var_of_channel(x: &Tensor, c: usize) -> f64 {
    let (n, ch, l) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let m = (n * l) as f64;
    let mut mean = 0.0;
    for s in 0..n {
        for j in 0..l {
            mean += x.data()[(s * ch + c) * l + j];
        }
    }
    mean /= m;
    let mut var = 0.0;
    for s in 0..n {
        for j in 0..l {
            let d = x.data()[(s * ch + c) * l + j] - mean;
            var += d * d;
        }
    }
    var / m
}

#[test]
fn bn_constant_channel_maps_to_zero() {
    let x = Tensor::full(&[4, 2], 3.7);
    let gamma = Tensor::full(&[2], 1.0);
    let beta = Tensor::zeros(&[2]);
    let mut running = RunningStats::new(2);
    let mut tape = GradTape::disabled();
    let y = batch_norm(&mut tape, &x, &gamma, &beta, &mut running, Mode::Train, 1e-5, 0.1).unwrap();
    for v in y.data() {
        assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
    }
}

#[test]
fn bn_infer_uses_running_stats() {
    // 3·(4−2)/2 + 1 = 4 with running mean 2, var 4, gamma 3, beta 1.
    // eps must be positive by contract; 1e-300 leaves the hand value intact.
    let x = Tensor::from_vec(vec![4.0], &[1, 1]).unwrap();
    let gamma = Tensor::full(&[1], 3.0);
    let beta = Tensor::full(&[1], 1.0);
    let mut running = RunningStats {
        mean: vec![2.0],
        var: vec![4.0],
    };
    let mut tape = GradTape::disabled();
    let y = batch_norm(&mut tape, &x, &gamma, &beta, &mut running, Mode::Infer, 1e-300, 0.1).unwrap();
    assert_abs_diff_eq!(y.item(), 4.0, epsilon = 1e-12);
}

#[test]
fn bn_train_rejects_single_sample_batch() {
    let x = Tensor::zeros(&[1, 4]);
    let gamma = Tensor::full(&[4], 1.0);
    let beta = Tensor::zeros(&[4]);
    let mut running = RunningStats::new(4);
    let mut tape = GradTape::disabled();
    let err = batch_norm(&mut tape, &x, &gamma, &beta, &mut running, Mode::Train, 1e-5, 0.1)
        .unwrap_err();
    assert!(matches!(err, TensorError::DegenerateBatch { n: 1 }));
}

#[test]
fn bn_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    for trial in 0..100 {
        let train = trial % 2 == 0;
        let x = Tensor::from_vec(randn_vec(&mut rng, 4 * 3 * 2 * 2), &[4, 3, 2, 2]).unwrap();
        let gamma = Tensor::from_vec(randn_vec(&mut rng, 3), &[3]).unwrap();
        let beta = Tensor::from_vec(randn_vec(&mut rng, 3), &[3]).unwrap();
        let mode = if train { Mode::Train } else { Mode::Infer };
        let base = RunningStats {
            mean: randn_vec(&mut rng, 3),
            var: randn_vec(&mut rng, 3).iter().map(|v| v.abs() + 0.5).collect(),
        };
        // In train mode the output statistics are constrained, so a
        // symmetric loss like sum(y²) barely depends on x and finite
        // differences lose precision. Random weights keep the adjoint
        // generic.
        let r = Tensor::from_vec(randn_vec(&mut rng, 4 * 3 * 2 * 2), &[4, 3, 2, 2]).unwrap();
        // d/dx
        let err = grad_check(
            |t, tape| {
                let mut running = base.clone();
                let y = batch_norm(tape, t, &gamma, &beta, &mut running, mode, 1e-5, 0.1)?;
                weighted_sq_sum(tape, &y, &r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "bn dx rel err {err} (trial {trial}, train={train})");
        // d/dgamma
        let err = grad_check(
            |t, tape| {
                let mut running = base.clone();
                let y = batch_norm(tape, &x, t, &beta, &mut running, mode, 1e-5, 0.1)?;
                weighted_sq_sum(tape, &y, &r)
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "bn dgamma rel err {err} (trial {trial})");
    }
}

// ---------------------------------------------------------------------------
// pool2d

#[test]
fn avg_pool_full_window_is_mean() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let x = Tensor::from_vec(randn_vec(&mut rng, 512 * 24 * 8), &[1, 512, 24, 8]).unwrap();
    let mut tape = GradTape::disabled();
    let y = pool2d(&mut tape, &x, (24, 8), PoolMode::Avg).unwrap();
    assert_eq!(y.shape(), &[1, 512, 1, 1]);
    for c in 0..512 {
        let mean = x.data()[c * 192..(c + 1) * 192].iter().sum::<f64>() / 192.0;
        assert_abs_diff_eq!(y.data()[c], mean, epsilon = 1e-12);
    }
}

#[test]
fn avg_pool_constant_input() {
    let x = Tensor::full(&[1, 2, 24, 8], 2.5);
    let mut tape = GradTape::disabled();
    let y = pool2d(&mut tape, &x, (12, 8), PoolMode::Avg).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2, 1]);
    for v in y.data() {
        assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-15);
    }
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2])
        .unwrap()
        .requiring_grad();
    let mut tape = GradTape::recording();
    let y = pool2d(&mut tape, &x, (2, 2), PoolMode::Max).unwrap();
    assert_abs_diff_eq!(y.data()[0], 4.0, epsilon = 1e-15);
    let loss = sum_all(&mut tape, &y).unwrap();
    backward(&loss, &tape).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn pool_rejects_non_dividing_window() {
    let x = Tensor::zeros(&[1, 1, 5, 4]);
    let mut tape = GradTape::disabled();
    assert!(pool2d(&mut tape, &x, (2, 2), PoolMode::Avg).is_err());
}

#[test]
fn pool_forward_oracle_random_shapes() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.random_range(1..3usize);
        let c = rng.random_range(1..4usize);
        let wh = rng.random_range(1..4usize);
        let ww = rng.random_range(1..4usize);
        let h = wh * rng.random_range(1..4usize);
        let w = ww * rng.random_range(1..4usize);
        let x = Tensor::from_vec(randn_vec(&mut rng, n * c * h * w), &[n, c, h, w]).unwrap();
        for max in [false, true] {
            let mut tape = GradTape::disabled();
            let mode = if max { PoolMode::Max } else { PoolMode::Avg };
            let y = pool2d(&mut tape, &x, (wh, ww), mode).unwrap();
            let oracle = naive_pool(x.data(), (n, c, h, w), (wh, ww), max);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn avg_pool_linearity_window_sum() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = Tensor::from_vec(randn_vec(&mut rng, 2 * 3 * 6 * 4), &[2, 3, 6, 4]).unwrap();
    let mut tape = GradTape::disabled();
    let avg = pool2d(&mut tape, &x, (3, 2), PoolMode::Avg).unwrap();
    // scaled by the window size, average pooling equals the window sum
    for (nc, chunk) in x.data().chunks(24).enumerate() {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..2 {
                        s += chunk[(oy * 3 + dy) * 4 + (ox * 2 + dx)];
                    }
                }
                let cell = avg.data()[(nc * 2 + oy) * 2 + ox] * 6.0;
                assert_abs_diff_eq!(cell, s, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn pool_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    for trial in 0..100 {
        let max = trial % 2 == 0;
        let x = Tensor::from_vec(randn_vec(&mut rng, 2 * 2 * 6 * 4), &[2, 2, 6, 4]).unwrap();
        let mode = if max { PoolMode::Max } else { PoolMode::Avg };
        let err = grad_check(
            |t, tape| {
                let y = pool2d(tape, t, (3, 2), mode)?;
                sq_sum(tape, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "pool rel err {err} (trial {trial}, max={max})");
    }
}

// ---------------------------------------------------------------------------
// linear

#[test]
fn linear_identity_weight() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let x = Tensor::from_vec(randn_vec(&mut rng, 3 * 4), &[3, 4]).unwrap();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let w = Tensor::from_vec(eye, &[4, 4]).unwrap();
    let mut tape = GradTape::disabled();
    let y = linear(&mut tape, &x, &w, None).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn linear_hand_product() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
    let w = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
    let mut tape = GradTape::disabled();
    let y = linear(&mut tape, &x, &w, None).unwrap();
    assert_eq!(y.data(), &[11.0, 17.0]);
}

#[test]
fn linear_shape_contract() {
    let x = Tensor::zeros(&[48, 512]);
    let w = Tensor::zeros(&[100, 512]);
    let mut tape = GradTape::disabled();
    let y = linear(&mut tape, &x, &w, None).unwrap();
    assert_eq!(y.shape(), &[48, 100]);

    let bad = Tensor::zeros(&[100, 256]);
    assert!(linear(&mut tape, &x, &bad, None).is_err());
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    for trial in 0..100 {
        let x = Tensor::from_vec(randn_vec(&mut rng, 3 * 5), &[3, 5]).unwrap();
        let w = Tensor::from_vec(randn_vec(&mut rng, 4 * 5), &[4, 5]).unwrap();
        let b = Tensor::from_vec(randn_vec(&mut rng, 4), &[4]).unwrap();
        let err = grad_check(
            |t, tape| {
                let y = linear(tape, t, &w, Some(&b))?;
                sq_sum(tape, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "linear dx rel err {err} (trial {trial})");
        let err = grad_check(
            |t, tape| {
                let y = linear(tape, &x, t, Some(&b))?;
                sq_sum(tape, &y)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "linear dw rel err {err} (trial {trial})");
    }
}

// ---------------------------------------------------------------------------
// relu

#[test]
fn relu_examples() {
    let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    let mut tape = GradTape::disabled();
    let y = relu(&mut tape, &x).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

    let pos = Tensor::from_vec(vec![0.5, 3.0, 0.0], &[3]).unwrap();
    let y = relu(&mut tape, &pos).unwrap();
    assert_eq!(y.data(), pos.data());
}

#[test]
fn relu_gradient_hand_case() {
    let x = Tensor::from_vec(vec![-1.0, 2.0], &[2]).unwrap().requiring_grad();
    let mut tape = GradTape::recording();
    let y = relu(&mut tape, &x).unwrap();
    let loss = sum_all(&mut tape, &y).unwrap();
    backward(&loss, &tape).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
}

#[test]
fn relu_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    for trial in 0..100 {
        let x = Tensor::from_vec(randn_vec(&mut rng, 20), &[4, 5]).unwrap();
        let err = grad_check(
            |t, tape| {
                let y = relu(tape, t)?;
                sq_sum(tape, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relu rel err {err} (trial {trial})");
    }
}

// ---------------------------------------------------------------------------
// backward

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::from_vec(vec![1.0, -3.0, 5.0, 0.2], &[2, 2])
        .unwrap()
        .requiring_grad();
    let mut tape = GradTape::recording();
    let loss = sum_all(&mut tape, &x).unwrap();
    backward(&loss, &tape).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_quadratic() {
    let x = Tensor::from_vec(vec![1.0, -2.0], &[2]).unwrap().requiring_grad();
    let mut tape = GradTape::recording();
    let sq = mul(&mut tape, &x, &x).unwrap();
    let loss = sum_all(&mut tape, &sq).unwrap();
    backward(&loss, &tape).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requiring_grad();
    let mut tape = GradTape::recording();
    let y = relu(&mut tape, &x).unwrap();
    let err = backward(&y, &tape).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss { .. }));
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requiring_grad();
    let mut tape = GradTape::recording();
    let loss = sum_all(&mut tape, &x).unwrap();
    backward(&loss, &tape).unwrap();
    backward(&loss, &tape).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn backward_composite_conv_bn_pool_linear() {
    let mut rng = ChaCha12Rng::seed_from_u64(14);
    let x0 = Tensor::from_vec(randn_vec(&mut rng, 2 * 2 * 4 * 4), &[2, 2, 4, 4]).unwrap();
    let w = Tensor::from_vec(randn_vec(&mut rng, 3 * 2 * 3 * 3), &[3, 2, 3, 3]).unwrap();
    let gamma = Tensor::from_vec(randn_vec(&mut rng, 3), &[3]).unwrap();
    let beta = Tensor::from_vec(randn_vec(&mut rng, 3), &[3]).unwrap();
    let fc = Tensor::from_vec(randn_vec(&mut rng, 2 * 3), &[2, 3]).unwrap();
    let run = |x: &Tensor, tape: &mut GradTape| -> Result<Tensor> {
        let c = conv2d(tape, x, &w, None, 1, 1)?;
        let mut running = RunningStats::new(3);
        let b = batch_norm(tape, &c, &gamma, &beta, &mut running, Mode::Train, 1e-5, 0.1)?;
        let r = relu(tape, &b)?;
        let p = pool2d(tape, &r, (4, 4), PoolMode::Avg)?;
        let flat = reshape(tape, &p, &[2, 3])?;
        let y = linear(tape, &flat, &fc, None)?;
        sq_sum(tape, &y)
    };
    let err = grad_check(run, &x0, 1e-5).unwrap();
    assert!(err < 1e-4, "composite rel err {err}");
}

// ---------------------------------------------------------------------------
// grad_check itself

#[test]
fn grad_check_exact_for_linear_functional() {
    let mut rng = ChaCha12Rng::seed_from_u64(15);
    let theta = Tensor::from_vec(randn_vec(&mut rng, 12), &[3, 4]).unwrap();
    let err = grad_check(|t, tape| sum_all(tape, t), &theta, 1e-5).unwrap();
    assert!(err < 1e-10, "sum rel err {err}");
}

// ---------------------------------------------------------------------------
// structural ops

#[test]
fn narrow_and_reshape_roundtrip_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(16);
    for _ in 0..20 {
        let x = Tensor::from_vec(randn_vec(&mut rng, 2 * 6 * 2), &[2, 6, 2]).unwrap();
        let err = grad_check(
            |t, tape| {
                let a = narrow(tape, t, 1, 1, 3)?;
                let r = reshape(tape, &a, &[2, 6])?;
                sq_sum(tape, &r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "narrow rel err {err}");
    }
}

#[test]
fn narrow_slices_expected_region() {
    let x = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
    let mut tape = GradTape::disabled();
    let y = narrow(&mut tape, &x, 1, 1, 2).unwrap();
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
}

#[test]
fn mask_mul_gradient_respects_mask() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap().requiring_grad();
    let mask = std::sync::Arc::new(vec![1.0, 0.0, 1.0]);
    let mut tape = GradTape::recording();
    let y = mask_mul(&mut tape, &x, mask).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0, 3.0]);
    let loss = sum_all(&mut tape, &y).unwrap();
    backward(&loss, &tape).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0]);
}

#[test]
fn add_scale_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let x = Tensor::from_vec(randn_vec(&mut rng, 6), &[6]).unwrap();
    let other = Tensor::from_vec(randn_vec(&mut rng, 6), &[6]).unwrap();
    let err = grad_check(
        |t, tape| {
            let s = add(tape, t, &other)?;
            let sc = scale(tape, &s, 2.5)?;
            sq_sum(tape, &sc)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4);
}
