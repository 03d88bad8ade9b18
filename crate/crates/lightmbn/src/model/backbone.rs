//! Pluggable backbone contract and the desk-scale substitute backbone.
//!
//! The contract: a shared trunk mapping N×3×384×128 images to an
//! N×C_b×24×8 feature map (total stride 16), plus three independent
//! continuations — one per branch — each producing N×E×24×8 with no
//! parameter sharing between them.

use rand_chacha::ChaCha12Rng;

use crate::tensor::{GradTape, Tensor};
use crate::Mode;

use super::layers::{BatchNorm, ConvBnRelu};
use super::{Branch, ModelError, Result};

pub trait Backbone: Send + Sync {
    fn trunk(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor>;
    fn tail(&self, tape: &mut GradTape, branch: Branch, t: &Tensor, mode: Mode) -> Result<Tensor>;
    fn trunk_channels(&self) -> usize;
    fn embed_channels(&self) -> usize;
    fn named_params(&self) -> Vec<(String, Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
    fn batch_norms(&self) -> Vec<(String, &BatchNorm)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TinyBackboneConfig {
    /// Output channels of the four stride-2 trunk stages; the last entry
    /// is C_b.
    pub trunk_channels: Vec<usize>,
    /// Channels of each branch continuation (E).
    pub embed_channels: usize,
}

impl Default for TinyBackboneConfig {
    fn default() -> Self {
        TinyBackboneConfig {
            trunk_channels: vec![8, 16, 32, 64],
            embed_channels: 512,
        }
    }
}

/// Small conv/bn/relu stack with total stride 16: four 3×3 stride-2 stages
/// shared by all branches, then a 1×1 conv/bn/relu continuation per branch.
pub struct TinyBackbone {
    stages: Vec<ConvBnRelu>,
    tails: Vec<(Branch, ConvBnRelu)>,
    trunk_out: usize,
    embed: usize,
}

impl TinyBackbone {
    pub fn new(cfg: &TinyBackboneConfig, branches: &[Branch], rng: &mut ChaCha12Rng) -> Result<TinyBackbone> {
        if cfg.trunk_channels.is_empty() {
            return Err(ModelError::Config("trunk_channels must be non-empty".into()));
        }
        let mut stages = Vec::new();
        let mut in_c = 3;
        for &out_c in &cfg.trunk_channels {
            stages.push(ConvBnRelu::new(in_c, out_c, 3, 2, 1, rng));
            in_c = out_c;
        }
        let trunk_out = in_c;
        let mut tails = Vec::new();
        for &branch in branches {
            tails.push((
                branch,
                ConvBnRelu::new(trunk_out, cfg.embed_channels, 1, 1, 0, rng),
            ));
        }
        Ok(TinyBackbone {
            stages,
            tails,
            trunk_out,
            embed: cfg.embed_channels,
        })
    }
}

impl Backbone for TinyBackbone {
    fn trunk(&self, tape: &mut GradTape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(tape, &cur, mode)?;
        }
        Ok(cur)
    }

    fn tail(&self, tape: &mut GradTape, branch: Branch, t: &Tensor, mode: Mode) -> Result<Tensor> {
        let tail = self
            .tails
            .iter()
            .find(|(b, _)| *b == branch)
            .map(|(_, tail)| tail)
            .ok_or_else(|| ModelError::Config(format!("no tail built for branch {branch:?}")))?;
        tail.forward(tape, t, mode)
    }

    fn trunk_channels(&self) -> usize {
        self.trunk_out
    }

    fn embed_channels(&self) -> usize {
        self.embed
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("trunk.{i}.conv.weight"), s.conv.weight.clone()));
            out.push((format!("trunk.{i}.bn.gamma"), s.bn.gamma.clone()));
            out.push((format!("trunk.{i}.bn.beta"), s.bn.beta.clone()));
        }
        for (branch, t) in &self.tails {
            let b = branch.name();
            out.push((format!("tail.{b}.conv.weight"), t.conv.weight.clone()));
            out.push((format!("tail.{b}.bn.gamma"), t.bn.gamma.clone()));
            out.push((format!("tail.{b}.bn.beta"), t.bn.beta.clone()));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("trunk.{i}.conv.weight"), &mut s.conv.weight));
            out.push((format!("trunk.{i}.bn.gamma"), &mut s.bn.gamma));
            out.push((format!("trunk.{i}.bn.beta"), &mut s.bn.beta));
        }
        for (branch, t) in &mut self.tails {
            let b = branch.name();
            out.push((format!("tail.{b}.conv.weight"), &mut t.conv.weight));
            out.push((format!("tail.{b}.bn.gamma"), &mut t.bn.gamma));
            out.push((format!("tail.{b}.bn.beta"), &mut t.bn.beta));
        }
        out
    }

    fn batch_norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("trunk.{i}.bn"), &s.bn));
        }
        for (branch, t) in &self.tails {
            out.push((format!("tail.{}.bn", branch.name()), &t.bn));
        }
        out
    }
}
