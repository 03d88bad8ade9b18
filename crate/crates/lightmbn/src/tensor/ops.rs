//! Forward operators and their adjoints.
//!
//! Convolution follows the cross-correlation convention (no kernel flip).
//! Pooling accepts only non-overlapping windows that divide the input
//! extent. All reductions are sequential or use per-sample partitioning
//! with ordered combination, so results are bit-reproducible regardless of
//! worker count.

use rayon::prelude::*;

use super::tape::{GradTape, TapeOp};
use super::{Result, Tensor, TensorError};
use crate::Mode;

// ---------------------------------------------------------------------------
// small dense kernels

/// a (m×k) @ b (k×n) -> m×n
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// a (m×k) @ b^T where b is (n×k) -> m×n (row-dot-row)
pub(crate) fn matmul_abt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a^T @ b where a is (k×m), b is (k×n) -> m×n
pub(crate) fn matmul_atb(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

fn out_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one sample (C×H×W) into a (C·kh·kw)×(OH·OW) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; c * kh * kw * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * ow + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Fold a patch-matrix gradient back onto the input plane (accumulating).
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] += col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// conv2d

struct Conv2dOp {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    stride: usize,
    pad: usize,
    out: Tensor,
}

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x, &self.w];
        if let Some(b) = &self.b {
            v.push(b);
        }
        v
    }

    fn output(&self) -> &Tensor {
        &self.out
    }

    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = dims4(self.x.shape());
        let (f, _, kh, kw) = dims4(self.w.shape());
        let oh = out_extent(h, self.pad, kh, self.stride);
        let ow = out_extent(w, self.pad, kw, self.stride);
        let ckk = c * kh * kw;
        let spatial = oh * ow;

        // Per-sample pieces computed independently, then combined in sample
        // order so the reduction is deterministic.
        let pieces: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &self.x.data()[s * c * h * w..(s + 1) * c * h * w];
                let gs = &grad_out[s * f * spatial..(s + 1) * f * spatial];
                let col = im2col(xs, c, h, w, kh, kw, self.stride, self.pad, oh, ow);
                let dw_s = matmul_abt(gs, f, spatial, &col, ckk);
                let dcol = matmul_atb(self.w.data(), f, ckk, gs, spatial);
                let dx_s = col2im(&dcol, c, h, w, kh, kw, self.stride, self.pad, oh, ow);
                (dw_s, dx_s)
            })
            .collect();

        let mut dw = vec![0.0; f * ckk];
        let mut dx = vec![0.0; n * c * h * w];
        for (s, (dw_s, dx_s)) in pieces.into_iter().enumerate() {
            for (a, b) in dw.iter_mut().zip(&dw_s) {
                *a += b;
            }
            dx[s * c * h * w..(s + 1) * c * h * w].copy_from_slice(&dx_s);
        }

        let db = self.b.as_ref().map(|_| {
            let mut db = vec![0.0; f];
            for s in 0..n {
                for (fi, dbf) in db.iter_mut().enumerate() {
                    let base = (s * f + fi) * spatial;
                    *dbf += grad_out[base..base + spatial].iter().sum::<f64>();
                }
            }
            db
        });

        let mut grads = vec![Some(dx), Some(dw)];
        if self.b.is_some() {
            grads.push(db);
        }
        grads
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Cross-correlation of `x` (N×C×H×W) with `w` (F×C×kh×kw), optional bias.
pub fn conv2d(
    tape: &mut GradTape,
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            axes: "rank",
            detail: format!(
                "expected 4-d input and kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        });
    }
    let (n, c, h, wd) = dims4(x.shape());
    let (f, ck, kh, kw) = dims4(w.shape());
    if ck != c {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            axes: "input channels vs kernel channels",
            detail: format!("input C={c}, kernel C={ck}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            axes: "spatial extent vs kernel",
            detail: format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * pad, wd + 2 * pad),
        });
    }
    if let Some(b) = b {
        if b.shape() != [f] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                axes: "bias vs output channels",
                detail: format!("bias shape {:?}, F={f}", b.shape()),
            });
        }
    }
    let oh = out_extent(h, pad, kh, stride);
    let ow = out_extent(wd, pad, kw, stride);
    let spatial = oh * ow;
    let ckk = c * kh * kw;

    let mut out = vec![0.0; n * f * spatial];
    out.par_chunks_mut(f * spatial)
        .zip(x.data().par_chunks(c * h * wd))
        .for_each(|(out_s, xs)| {
            let col = im2col(xs, c, h, wd, kh, kw, stride, pad, oh, ow);
            let prod = matmul(w.data(), f, ckk, &col, spatial);
            out_s.copy_from_slice(&prod);
            if let Some(b) = b {
                for (fi, bv) in b.data().iter().enumerate() {
                    for o in &mut out_s[fi * spatial..(fi + 1) * spatial] {
                        *o += bv;
                    }
                }
            }
        });

    let requires = x.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
    let result = Tensor::from_op(out, vec![n, f, oh, ow], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(Conv2dOp {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            stride,
            pad,
            out: result.clone(),
        }));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// batch normalization

/// Per-channel running statistics, updated in train mode.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

struct BatchNormOp {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    out: Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

/// (N, C, L) view of an N×C or N×C×H×W tensor.
fn bn_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl TapeOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x, &self.gamma, &self.beta]
    }

    fn output(&self) -> &Tensor {
        &self.out
    }

    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, l) = bn_dims(self.x.shape()).expect("validated in forward");
        let m = (n * l) as f64;
        let x = self.x.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; n * c * l];

        for ci in 0..c {
            let mu = self.mean[ci];
            let istd = self.inv_std[ci];
            let g = self.gamma.data()[ci];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for s in 0..n {
                let base = (s * c + ci) * l;
                for j in 0..l {
                    let dy = grad_out[base + j];
                    let xhat = (x[base + j] - mu) * istd;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            if self.train {
                for s in 0..n {
                    let base = (s * c + ci) * l;
                    for j in 0..l {
                        let dy = grad_out[base + j];
                        let xhat = (x[base + j] - mu) * istd;
                        dx[base + j] =
                            g * istd / m * (m * dy - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            } else {
                for s in 0..n {
                    let base = (s * c + ci) * l;
                    for j in 0..l {
                        dx[base + j] = grad_out[base + j] * g * istd;
                    }
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Batch normalization over all axes except the channel axis. Train mode
/// normalizes with batch statistics and updates `running`; infer mode uses
/// the running statistics. `gamma`/`beta` are applied per channel.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    tape: &mut GradTape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor> {
    let Some((n, c, l)) = bn_dims(x.shape()) else {
        return Err(TensorError::DimMismatch {
            op: "batch_norm",
            axes: "rank",
            detail: format!("expected N×C or N×C×H×W, got {:?}", x.shape()),
        });
    };
    if gamma.shape() != [c] || beta.shape() != [c] || running.mean.len() != c || running.var.len() != c {
        return Err(TensorError::DimMismatch {
            op: "batch_norm",
            axes: "channel parameters",
            detail: format!(
                "C={c}, gamma {:?}, beta {:?}, running {}",
                gamma.shape(),
                beta.shape(),
                running.mean.len()
            ),
        });
    }
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "batch_norm",
            detail: "eps must be positive".into(),
        });
    }
    if mode == Mode::Train && n < 2 {
        return Err(TensorError::DegenerateBatch { n });
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let m = (n * l) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for s in 0..n {
                    let base = (s * c + ci) * l;
                    acc += x.data()[base..base + l].iter().sum::<f64>();
                }
                mean[ci] = acc / m;
                let mut vacc = 0.0;
                for s in 0..n {
                    let base = (s * c + ci) * l;
                    for j in 0..l {
                        let d = x.data()[base + j] - mean[ci];
                        vacc += d * d;
                    }
                }
                var[ci] = vacc / m;
            }
            // running variance keeps the unbiased estimate
            let unbias = m / (m - 1.0);
            for ci in 0..c {
                running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                running.var[ci] = (1.0 - momentum) * running.var[ci] + momentum * var[ci] * unbias;
            }
            (mean, var)
        }
        Mode::Infer => (running.mean.clone(), running.var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; n * c * l];
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * l;
            let g = gamma.data()[ci];
            let b = beta.data()[ci];
            let mu = mean[ci];
            let istd = inv_std[ci];
            for j in 0..l {
                out[base + j] = g * (x.data()[base + j] - mu) * istd + b;
            }
        }
    }

    let requires = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let result = Tensor::from_op(out, x.shape().to_vec(), requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(BatchNormOp {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: result.clone(),
            mean,
            inv_std,
            train: mode == Mode::Train,
        }));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

struct Pool2dOp {
    x: Tensor,
    out: Tensor,
    window: (usize, usize),
    mode: PoolMode,
    /// flat input index of the max per output cell (Max mode only)
    argmax: Vec<usize>,
}

impl TapeOp for Pool2dOp {
    fn name(&self) -> &'static str {
        "pool2d"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }

    fn output(&self) -> &Tensor {
        &self.out
    }

    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = dims4(self.x.shape());
        let (wh, ww) = self.window;
        let (oh, ow) = (h / wh, w / ww);
        let mut dx = vec![0.0; n * c * h * w];
        match self.mode {
            PoolMode::Avg => {
                let inv = 1.0 / (wh * ww) as f64;
                for nc in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out[(nc * oh + oy) * ow + ox] * inv;
                            for dy in 0..wh {
                                let row = nc * h * w + (oy * wh + dy) * w + ox * ww;
                                for v in &mut dx[row..row + ww] {
                                    *v += g;
                                }
                            }
                        }
                    }
                }
            }
            PoolMode::Max => {
                for (cell, &src) in self.argmax.iter().enumerate() {
                    dx[src] += grad_out[cell];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Non-overlapping 2-d pooling; the window must divide the spatial extents.
/// Max mode records the argmax for the backward pass (ties resolve to the
/// first position in scan order).
pub fn pool2d(
    tape: &mut GradTape,
    x: &Tensor,
    window: (usize, usize),
    mode: PoolMode,
) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(TensorError::DimMismatch {
            op: "pool2d",
            axes: "rank",
            detail: format!("expected N×C×H×W, got {:?}", x.shape()),
        });
    }
    let (n, c, h, w) = dims4(x.shape());
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(TensorError::DimMismatch {
            op: "pool2d",
            axes: "window vs spatial extent",
            detail: format!("window {wh}x{ww} must divide input {h}x{w}"),
        });
    }
    let (oh, ow) = (h / wh, w / ww);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = Vec::new();
    match mode {
        PoolMode::Avg => {
            let inv = 1.0 / (wh * ww) as f64;
            for nc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..wh {
                            let row = nc * h * w + (oy * wh + dy) * w + ox * ww;
                            acc += x.data()[row..row + ww].iter().sum::<f64>();
                        }
                        out[(nc * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
        }
        PoolMode::Max => {
            argmax = vec![0; n * c * oh * ow];
            for nc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..wh {
                            let row = nc * h * w + (oy * wh + dy) * w + ox * ww;
                            for dxp in 0..ww {
                                let v = x.data()[row + dxp];
                                if v > best {
                                    best = v;
                                    best_idx = row + dxp;
                                }
                            }
                        }
                        let cell = (nc * oh + oy) * ow + ox;
                        out[cell] = best;
                        argmax[cell] = best_idx;
                    }
                }
            }
        }
    }

    let requires = x.requires_grad();
    let result = Tensor::from_op(out, vec![n, c, oh, ow], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(Pool2dOp {
            x: x.clone(),
            out: result.clone(),
            window,
            mode,
            argmax,
        }));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// linear

struct LinearOp {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    out: Tensor,
}

impl TapeOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x, &self.w];
        if let Some(b) = &self.b {
            v.push(b);
        }
        v
    }

    fn output(&self) -> &Tensor {
        &self.out
    }

    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, d) = (self.x.shape()[0], self.x.shape()[1]);
        let k = self.w.shape()[0];
        let dx = matmul(grad_out, n, k, self.w.data(), d);
        let dw = matmul_atb(grad_out, n, k, self.x.data(), d);
        let mut grads = vec![Some(dx), Some(dw)];
        if self.b.is_some() {
            let mut db = vec![0.0; k];
            for s in 0..n {
                for (ki, dbk) in db.iter_mut().enumerate() {
                    *dbk += grad_out[s * k + ki];
                }
            }
            grads.push(Some(db));
        }
        grads
    }
}

/// x (N×D) @ w^T (w is K×D) + optional bias (K) -> N×K.
pub fn linear(tape: &mut GradTape, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(TensorError::DimMismatch {
            op: "linear",
            axes: "inner dimension",
            detail: format!("x {:?}, w {:?}", x.shape(), w.shape()),
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    if let Some(b) = b {
        if b.shape() != [k] {
            return Err(TensorError::DimMismatch {
                op: "linear",
                axes: "bias vs output features",
                detail: format!("bias {:?}, K={k}", b.shape()),
            });
        }
    }
    let mut out = matmul_abt(x.data(), n, d, w.data(), k);
    if let Some(b) = b {
        for s in 0..n {
            for (ki, bv) in b.data().iter().enumerate() {
                out[s * k + ki] += bv;
            }
        }
    }
    let requires = x.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
    let result = Tensor::from_op(out, vec![n, k], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(LinearOp {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            out: result.clone(),
        }));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// elementwise and structural ops

macro_rules! simple_op {
    ($name:ident, $opname:literal, [$($field:ident),*], |$self_:ident, $g:ident| $grads:expr) => {
        struct $name {
            $($field: Tensor,)*
            out: Tensor,
        }
        impl TapeOp for $name {
            fn name(&self) -> &'static str { $opname }
            fn inputs(&self) -> Vec<&Tensor> { vec![$(&self.$field),*] }
            fn output(&self) -> &Tensor { &self.out }
            fn grad_inputs(&$self_, $g: &[f64]) -> Vec<Option<Vec<f64>>> { $grads }
        }
    };
}

simple_op!(ReluOp, "relu", [x], |self, g| {
    let dx = self
        .x
        .data()
        .iter()
        .zip(g)
        .map(|(&v, &go)| if v > 0.0 { go } else { 0.0 })
        .collect();
    vec![Some(dx)]
});

/// relu(x) = max(x, 0); the subgradient at 0 is 0.
pub fn relu(tape: &mut GradTape, x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let requires = x.requires_grad();
    let result = Tensor::from_op(out, x.shape().to_vec(), requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(ReluOp {
            x: x.clone(),
            out: result.clone(),
        }));
    }
    Ok(result)
}

simple_op!(AddOp, "add", [a, b], |self, g| vec![
    Some(g.to_vec()),
    Some(g.to_vec())
]);

pub fn add(tape: &mut GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "add",
            axes: "operand shapes",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let requires = a.requires_grad() || b.requires_grad();
    let result = Tensor::from_op(out, a.shape().to_vec(), requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(AddOp {
            a: a.clone(),
            b: b.clone(),
            out: result.clone(),
        }));
    }
    Ok(result)
}

simple_op!(MulOp, "mul", [a, b], |self, g| {
    let da = self.b.data().iter().zip(g).map(|(&b, &go)| b * go).collect();
    let db = self.a.data().iter().zip(g).map(|(&a, &go)| a * go).collect();
    vec![Some(da), Some(db)]
});

pub fn mul(tape: &mut GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "mul",
            axes: "operand shapes",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let requires = a.requires_grad() || b.requires_grad();
    let result = Tensor::from_op(out, a.shape().to_vec(), requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(MulOp {
            a: a.clone(),
            b: b.clone(),
            out: result.clone(),
        }));
    }
    Ok(result)
}

struct ScaleOp {
    x: Tensor,
    c: f64,
    out: Tensor,
}

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn output(&self) -> &Tensor {
        &self.out
    }
    fn grad_inputs(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|&v| v * self.c).collect())]
    }
}

pub fn scale(tape: &mut GradTape, x: &Tensor, c: f64) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| v * c).collect();
    let requires = x.requires_grad();
    let result = Tensor::from_op(out, x.shape().to_vec(), requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(ScaleOp {
            x: x.clone(),
            c,
            out: result.clone(),
        }));
    }
    Ok(result)
}

simple_op!(SumAllOp, "sum_all", [x], |self, g| vec![Some(vec![
    g[0];
    self.x.numel()
])]);

/// Sum of all entries, as a scalar tensor.
pub fn sum_all(tape: &mut GradTape, x: &Tensor) -> Result<Tensor> {
    let out = vec![x.data().iter().sum::<f64>()];
    let requires = x.requires_grad();
    let result = Tensor::from_op(out, vec![], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(SumAllOp {
            x: x.clone(),
            out: result.clone(),
        }));
    }
    Ok(result)
}

struct NarrowOp {
    x: Tensor,
    axis: usize,
    start: usize,
    len: usize,
    out: Tensor,
}

impl TapeOp for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn output(&self) -> &Tensor {
        &self.out
    }
    fn grad_inputs(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let shape = self.x.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let axis_len = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let mut dx = vec![0.0; self.x.numel()];
        for o in 0..outer {
            for a in 0..self.len {
                let src = (o * self.len + a) * inner;
                let dst = (o * axis_len + self.start + a) * inner;
                dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
            }
        }
        vec![Some(dx)]
    }
}

/// Contiguous slice of length `len` starting at `start` along `axis`.
pub fn narrow(tape: &mut GradTape, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] || len == 0 {
        return Err(TensorError::DimMismatch {
            op: "narrow",
            axes: "slice bounds",
            detail: format!("axis {axis}, start {start}, len {len} on shape {shape:?}"),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = (o * axis_len + start + a) * inner;
            let dst = (o * len + a) * inner;
            out[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = len;
    let requires = x.requires_grad();
    let result = Tensor::from_op(out, new_shape, requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(NarrowOp {
            x: x.clone(),
            axis,
            start,
            len,
            out: result.clone(),
        }));
    }
    Ok(result)
}

simple_op!(ReshapeOp, "reshape", [x], |self, g| vec![Some(g.to_vec())]);

pub fn reshape(tape: &mut GradTape, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let expected: usize = new_shape.iter().product();
    if expected != x.numel() {
        return Err(TensorError::ElementCount {
            op: "reshape",
            shape: new_shape.to_vec(),
            expected,
            got: x.numel(),
        });
    }
    let requires = x.requires_grad();
    let result = Tensor::from_op(
        x.data().to_vec(),
        new_shape.to_vec(),
        requires && tape.is_recording(),
    );
    if tape.is_recording() && requires {
        tape.push(Box::new(ReshapeOp {
            x: x.clone(),
            out: result.clone(),
        }));
    }
    Ok(result)
}

struct MaskMulOp {
    x: Tensor,
    mask: std::sync::Arc<Vec<f64>>,
    out: Tensor,
}

impl TapeOp for MaskMulOp {
    fn name(&self) -> &'static str {
        "mask_mul"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn output(&self) -> &Tensor {
        &self.out
    }
    fn grad_inputs(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let dx = self.mask.iter().zip(g).map(|(&m, &go)| m * go).collect();
        vec![Some(dx)]
    }
}

/// Elementwise multiplication by a constant mask (the mask itself receives
/// no gradient).
pub fn mask_mul(tape: &mut GradTape, x: &Tensor, mask: std::sync::Arc<Vec<f64>>) -> Result<Tensor> {
    if mask.len() != x.numel() {
        return Err(TensorError::ElementCount {
            op: "mask_mul",
            shape: x.shape().to_vec(),
            expected: x.numel(),
            got: mask.len(),
        });
    }
    let out: Vec<f64> = x.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
    let requires = x.requires_grad();
    let result = Tensor::from_op(out, x.shape().to_vec(), requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(MaskMulOp {
            x: x.clone(),
            mask,
            out: result.clone(),
        }));
    }
    Ok(result)
}
