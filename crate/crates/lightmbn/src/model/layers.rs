//! Parameterized layers: convolution, batch norm, linear, and the BNNeck
//! head. Weights initialize from a zero-mean normal scaled by fan-in;
//! batch-norm gamma starts at 1 and beta at 0.

use std::sync::RwLock;

use rand_chacha::ChaCha12Rng;

use crate::tensor::{self, GradTape, RunningStats, Tensor};
use crate::Mode;

use super::{ModelError, Result};

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Conv2d {
        let fan_in = (in_c * kernel * kernel) as f64;
        let weight = Tensor::randn(&[out_c, in_c, kernel, kernel], 1.0 / fan_in.sqrt(), rng)
            .requiring_grad();
        let bias = bias.then(|| Tensor::zeros(&[out_c]).requiring_grad());
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut GradTape, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::conv2d(
            tape,
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.pad,
        )?)
    }
}

pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running: RwLock<RunningStats>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0).requiring_grad(),
            beta: Tensor::zeros(&[channels]).requiring_grad(),
            running: RwLock::new(RunningStats::new(channels)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut running = self.running.write().expect("running stats lock");
        Ok(tensor::batch_norm(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &mut running,
            mode,
            self.eps,
            self.momentum,
        )?)
    }

    pub fn running_stats(&self) -> RunningStats {
        self.running.read().expect("running stats lock").clone()
    }

    pub fn set_running_stats(&self, stats: RunningStats) -> Result<()> {
        let channels = self.gamma.numel();
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(ModelError::Config(format!(
                "running stats for {} channels loaded into a {channels}-channel layer",
                stats.mean.len()
            )));
        }
        *self.running.write().expect("running stats lock") = stats;
        Ok(())
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, bias: bool, rng: &mut ChaCha12Rng) -> Linear {
        let weight =
            Tensor::randn(&[out_f, in_f], 1.0 / (in_f as f64).sqrt(), rng).requiring_grad();
        let bias = bias.then(|| Tensor::zeros(&[out_f]).requiring_grad());
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut GradTape, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::linear(tape, x, &self.weight, self.bias.as_ref())?)
    }
}

/// Conv → batch norm → relu block used throughout the substitute backbone.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> ConvBnRelu {
        ConvBnRelu {
            conv: Conv2d::new(in_c, out_c, kernel, stride, pad, false, rng),
            bn: BatchNorm::new(out_c),
        }
    }

    pub fn forward(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.conv.forward(tape, x)?;
        let b = self.bn.forward(tape, &c, mode)?;
        Ok(tensor::relu(tape, &b)?)
    }
}

/// BNNeck: per-feature batch normalization followed by a bias-free class
/// projection. One forward exposes all three views — the raw embedding
/// (ranking space), the normalized embedding (inference), and the class
/// logits (identity space).
pub struct BnNeck {
    pub bn: BatchNorm,
    pub fc: Linear,
}

impl BnNeck {
    pub fn new(features: usize, classes: usize, rng: &mut ChaCha12Rng) -> BnNeck {
        BnNeck {
            bn: BatchNorm::new(features),
            fc: Linear::new(features, classes, false, rng),
        }
    }

    /// Returns (pre-BN, post-BN, logits).
    pub fn forward(
        &self,
        tape: &mut GradTape,
        embedding: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        if embedding.shape().len() != 2 || embedding.shape()[1] != self.bn.gamma.numel() {
            return Err(ModelError::InputShape {
                expected: format!("N×{}", self.bn.gamma.numel()),
                got: embedding.shape().to_vec(),
            });
        }
        let post = self.bn.forward(tape, embedding, mode)?;
        let logits = self.fc.forward(tape, &post)?;
        Ok((embedding.clone(), post, logits))
    }
}
