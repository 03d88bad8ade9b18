//! The multi-branch embedding network: shared trunk, global / channel /
//! part branches, drop block, BNNeck heads, and the assembly of the
//! identity-space and ranking-space embedding sets.

mod backbone;
mod checkpoint;
mod drop_block;
mod layers;

#[cfg(test)]
mod tests;

pub use backbone::{Backbone, TinyBackbone, TinyBackboneConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use drop_block::{band_bounds, drop_block};
pub use layers::{BatchNorm, BnNeck, Conv2d, ConvBnRelu, Linear};

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::tensor::{self, GradTape, PoolMode, Tensor, TensorError};
use crate::Mode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config error: {0}")]
    Config(String),
    #[error("input shape mismatch: expected {expected}, got {got:?}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("checkpoint mismatch:\n{0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// The three branches of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Global,
    Part,
    Channel,
}

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Part => "part",
            Branch::Channel => "channel",
        }
    }
}

/// The seven embedding heads, in the fixed assembly/concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadId {
    G,
    GDrop,
    P1,
    P2,
    PGlobal,
    C1,
    C2,
}

impl HeadId {
    pub fn name(&self) -> &'static str {
        match self {
            HeadId::G => "g",
            HeadId::GDrop => "g_drop",
            HeadId::P1 => "p1",
            HeadId::P2 => "p2",
            HeadId::PGlobal => "p_g",
            HeadId::C1 => "c1",
            HeadId::C2 => "c2",
        }
    }

    /// Heads whose pre-BN embedding feeds the ranking loss.
    pub fn in_ranking_set(&self) -> bool {
        matches!(self, HeadId::G | HeadId::GDrop | HeadId::PGlobal)
    }
}

/// Which branches are enabled (the ablation axis of the branch study).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSet {
    pub global: bool,
    pub channel: bool,
    pub part: bool,
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet {
            global: true,
            channel: true,
            part: true,
        }
    }
}

impl BranchSet {
    /// Parse a spec like "G+C+P", "G", or "c+p" (order and case free).
    pub fn parse(s: &str) -> Result<BranchSet> {
        let mut set = BranchSet {
            global: false,
            channel: false,
            part: false,
        };
        for tok in s.split('+') {
            match tok.trim().to_ascii_uppercase().as_str() {
                "G" => set.global = true,
                "C" => set.channel = true,
                "P" => set.part = true,
                other => {
                    return Err(ModelError::Config(format!(
                        "unknown branch '{other}' in '{s}' (expected G, C, P)"
                    )))
                }
            }
        }
        if !set.any() {
            return Err(ModelError::Config("at least one branch must be enabled".into()));
        }
        Ok(set)
    }

    pub fn any(&self) -> bool {
        self.global || self.channel || self.part
    }

    /// Enabled branches in assembly order (global, part, channel).
    pub fn enabled(&self) -> Vec<Branch> {
        let mut v = Vec::new();
        if self.global {
            v.push(Branch::Global);
        }
        if self.part {
            v.push(Branch::Part);
        }
        if self.channel {
            v.push(Branch::Channel);
        }
        v
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.global {
            parts.push("G");
        }
        if self.channel {
            parts.push("C");
        }
        if self.part {
            parts.push("P");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub branches: BranchSet,
    pub backbone: TinyBackboneConfig,
    /// Fraction of rows removed by the drop block.
    pub drop_ratio: f64,
    /// Drop-block ablation toggle; when off the block is identity and the
    /// g_drop head reduces to a plain max pool.
    pub drop_block: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            branches: BranchSet::default(),
            backbone: TinyBackboneConfig::default(),
            drop_ratio: 1.0 / 3.0,
            drop_block: true,
        }
    }
}

/// One BNNeck view triple.
pub struct Head {
    pub id: HeadId,
    /// pre-BN embedding (ranking space)
    pub pre: Tensor,
    /// post-BN embedding (inference)
    pub post: Tensor,
    /// post-FC class scores (identity space)
    pub logits: Tensor,
}

/// Output of one forward pass: every enabled head's three views, in the
/// fixed order g, g_drop, p1, p2, p_g, c1, c2 restricted to enabled
/// branches.
pub struct EmbeddingBundle {
    heads: Vec<Head>,
}

impl EmbeddingBundle {
    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn head(&self, id: HeadId) -> Option<&Head> {
        self.heads.iter().find(|h| h.id == id)
    }

    /// Heads contributing their pre-BN embedding to the ranking loss.
    pub fn ranking_heads(&self) -> Vec<&Head> {
        self.heads.iter().filter(|h| h.id.in_ranking_set()).collect()
    }

    pub fn num_identity_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_ranking_heads(&self) -> usize {
        self.ranking_heads().len()
    }

    /// Concatenation of the post-BN vectors in head order (no per-part
    /// renormalization; cosine distance downstream normalizes globally).
    pub fn inference_embedding(&self) -> Tensor {
        assert!(!self.heads.is_empty());
        let n = self.heads[0].post.shape()[0];
        let width: usize = self.heads.iter().map(|h| h.post.shape()[1]).sum();
        let mut out = vec![0.0; n * width];
        for row in 0..n {
            let mut offset = 0;
            for head in &self.heads {
                let e = head.post.shape()[1];
                out[row * width + offset..row * width + offset + e]
                    .copy_from_slice(&head.post.data()[row * e..(row + 1) * e]);
                offset += e;
            }
        }
        Tensor::from_vec(out, &[n, width]).expect("consistent head widths")
    }
}

/// The assembled network.
pub struct Model {
    pub cfg: ModelConfig,
    backbone: Box<dyn Backbone>,
    heads: Vec<(HeadId, BnNeck)>,
    /// Shared projection of the two channel halves back to full width.
    channel_proj: Option<Linear>,
}

/// Build a model with freshly initialized parameters.
pub fn build_model(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Result<Model> {
    if cfg.num_classes < 2 {
        return Err(ModelError::Config(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if !cfg.branches.any() {
        return Err(ModelError::Config("at least one branch must be enabled".into()));
    }
    let e = cfg.backbone.embed_channels;
    if e % 2 != 0 || e == 0 {
        return Err(ModelError::Config(format!(
            "embed_channels must be even and positive, got {e}"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.drop_ratio) {
        return Err(ModelError::Config(format!(
            "drop_ratio must lie in [0,1], got {}",
            cfg.drop_ratio
        )));
    }

    let branches = cfg.branches.enabled();
    let backbone = TinyBackbone::new(&cfg.backbone, &branches, rng)?;

    let mut heads = Vec::new();
    let make_head = |id: HeadId, rng: &mut ChaCha12Rng| (id, BnNeck::new(e, cfg.num_classes, rng));
    if cfg.branches.global {
        heads.push(make_head(HeadId::G, rng));
        heads.push(make_head(HeadId::GDrop, rng));
    }
    if cfg.branches.part {
        heads.push(make_head(HeadId::P1, rng));
        heads.push(make_head(HeadId::P2, rng));
        heads.push(make_head(HeadId::PGlobal, rng));
    }
    if cfg.branches.channel {
        heads.push(make_head(HeadId::C1, rng));
        heads.push(make_head(HeadId::C2, rng));
    }
    let channel_proj = cfg.branches.channel.then(|| Linear::new(e / 2, e, true, rng));

    Ok(Model {
        cfg: cfg.clone(),
        backbone: Box::new(backbone),
        heads,
        channel_proj,
    })
}

impl Model {
    pub const INPUT_H: usize = 384;
    pub const INPUT_W: usize = 128;
    const MAP_H: usize = 24;
    const MAP_W: usize = 8;

    pub fn embed_channels(&self) -> usize {
        self.backbone.embed_channels()
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    /// Width of the concatenated inference embedding.
    pub fn inference_width(&self) -> usize {
        self.heads.len() * self.backbone.embed_channels()
    }

    pub fn head_names(&self) -> Vec<&'static str> {
        self.heads.iter().map(|(id, _)| id.name()).collect()
    }

    pub fn ranking_head_names(&self) -> Vec<&'static str> {
        self.heads
            .iter()
            .filter(|(id, _)| id.in_ranking_set())
            .map(|(id, _)| id.name())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Full forward pass. Train mode needs N >= 2 for batch statistics;
    /// the spatial size must be exactly 384×128.
    pub fn forward(&self, tape: &mut GradTape, batch: &Tensor, mode: Mode) -> Result<EmbeddingBundle> {
        let shape = batch.shape();
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != Self::INPUT_H
            || shape[3] != Self::INPUT_W
        {
            return Err(ModelError::InputShape {
                expected: format!("N×3×{}×{}", Self::INPUT_H, Self::INPUT_W),
                got: shape.to_vec(),
            });
        }
        if mode == Mode::Train && shape[0] < 2 {
            return Err(ModelError::Config(
                "train-mode forward needs a batch of at least 2".into(),
            ));
        }

        let trunk = self.backbone.trunk(tape, batch, mode)?;
        let mut heads = Vec::new();
        for branch in self.cfg.branches.enabled() {
            let tail = self.backbone.tail(tape, branch, &trunk, mode)?;
            for (id, pre) in self.branch_embeddings(tape, branch, &tail, mode)? {
                let neck = &self
                    .heads
                    .iter()
                    .find(|(hid, _)| *hid == id)
                    .expect("head built for enabled branch")
                    .1;
                let (pre, post, logits) = neck.forward(tape, &pre, mode)?;
                heads.push(Head {
                    id,
                    pre,
                    post,
                    logits,
                });
            }
        }
        Ok(EmbeddingBundle { heads })
    }

    /// Per-branch reduction of a tail volume (N×E×24×8) to its pre-BN
    /// embeddings. Exposed for direct testing of the branch geometry.
    pub fn branch_embeddings(
        &self,
        tape: &mut GradTape,
        branch: Branch,
        tail: &Tensor,
        mode: Mode,
    ) -> Result<Vec<(HeadId, Tensor)>> {
        let shape = tail.shape();
        let e = self.backbone.embed_channels();
        if shape.len() != 4 || shape[1] != e || shape[2] != Self::MAP_H || shape[3] != Self::MAP_W {
            return Err(ModelError::InputShape {
                expected: format!("N×{e}×{}×{}", Self::MAP_H, Self::MAP_W),
                got: shape.to_vec(),
            });
        }
        let n = shape[0];
        let full = (Self::MAP_H, Self::MAP_W);
        let flat = |tape: &mut GradTape, t: &Tensor| -> Result<Tensor> {
            Ok(tensor::reshape(tape, t, &[n, e])?)
        };

        match branch {
            Branch::Global => {
                let g_pool = tensor::pool2d(tape, tail, full, PoolMode::Avg)?;
                let g = flat(tape, &g_pool)?;
                let ratio = if self.cfg.drop_block {
                    self.cfg.drop_ratio
                } else {
                    0.0
                };
                let dropped = drop_block(tape, tail, ratio, mode)?;
                let gd_pool = tensor::pool2d(tape, &dropped, full, PoolMode::Max)?;
                let g_drop = flat(tape, &gd_pool)?;
                Ok(vec![(HeadId::G, g), (HeadId::GDrop, g_drop)])
            }
            Branch::Part => {
                let halves =
                    tensor::pool2d(tape, tail, (Self::MAP_H / 2, Self::MAP_W), PoolMode::Avg)?;
                let upper = tensor::narrow(tape, &halves, 2, 0, 1)?;
                let lower = tensor::narrow(tape, &halves, 2, 1, 1)?;
                let p1 = flat(tape, &upper)?;
                let p2 = flat(tape, &lower)?;
                let pg_pool = tensor::pool2d(tape, tail, full, PoolMode::Max)?;
                let p_g = flat(tape, &pg_pool)?;
                Ok(vec![(HeadId::P1, p1), (HeadId::P2, p2), (HeadId::PGlobal, p_g)])
            }
            Branch::Channel => {
                let proj = self
                    .channel_proj
                    .as_ref()
                    .ok_or_else(|| ModelError::Config("channel branch not built".into()))?;
                let pooled = tensor::pool2d(tape, tail, full, PoolMode::Avg)?;
                let v = flat(tape, &pooled)?;
                let h1 = tensor::narrow(tape, &v, 1, 0, e / 2)?;
                let h2 = tensor::narrow(tape, &v, 1, e / 2, e / 2)?;
                let c1 = proj.forward(tape, &h1)?;
                let c2 = proj.forward(tape, &h2)?;
                Ok(vec![(HeadId::C1, c1), (HeadId::C2, c2)])
            }
        }
    }

    /// Infer-mode forward returning the concatenated inference embedding.
    pub fn infer_embeddings(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::disabled();
        let bundle = self.forward(&mut tape, batch, Mode::Infer)?;
        Ok(bundle.inference_embedding())
    }

    /// Assemble every enabled head from one shared tail volume instead of
    /// the per-branch backbone continuations. Test scaffolding for the
    /// branch geometry and head wiring.
    pub fn bundle_from_shared_tail(
        &self,
        tape: &mut GradTape,
        tail: &Tensor,
        mode: Mode,
    ) -> Result<EmbeddingBundle> {
        let mut heads = Vec::new();
        for branch in self.cfg.branches.enabled() {
            for (id, pre) in self.branch_embeddings(tape, branch, tail, mode)? {
                let neck = &self
                    .heads
                    .iter()
                    .find(|(hid, _)| *hid == id)
                    .expect("head built for enabled branch")
                    .1;
                let (pre, post, logits) = neck.forward(tape, &pre, mode)?;
                heads.push(Head {
                    id,
                    pre,
                    post,
                    logits,
                });
            }
        }
        Ok(EmbeddingBundle { heads })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.backbone.named_params();
        if let Some(proj) = &self.channel_proj {
            out.push(("channel_proj.weight".into(), proj.weight.clone()));
            if let Some(b) = &proj.bias {
                out.push(("channel_proj.bias".into(), b.clone()));
            }
        }
        for (id, neck) in &self.heads {
            let h = id.name();
            out.push((format!("head.{h}.bn.gamma"), neck.bn.gamma.clone()));
            out.push((format!("head.{h}.bn.beta"), neck.bn.beta.clone()));
            out.push((format!("head.{h}.fc.weight"), neck.fc.weight.clone()));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_params_mut();
        if let Some(proj) = &mut self.channel_proj {
            out.push(("channel_proj.weight".into(), &mut proj.weight));
            if let Some(b) = &mut proj.bias {
                out.push(("channel_proj.bias".into(), b));
            }
        }
        for (id, neck) in &mut self.heads {
            let h = id.name();
            out.push((format!("head.{h}.bn.gamma"), &mut neck.bn.gamma));
            out.push((format!("head.{h}.bn.beta"), &mut neck.bn.beta));
            out.push((format!("head.{h}.fc.weight"), &mut neck.fc.weight));
        }
        out
    }

    /// Every batch-norm layer, for running-statistics persistence.
    pub fn batch_norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut out = self.backbone.batch_norms();
        for (id, neck) in &self.heads {
            out.push((format!("head.{}.bn", id.name()), &neck.bn));
        }
        out
    }
}
