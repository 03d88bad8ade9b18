//! Run configuration: a flat UTF-8 `key = value` file with documented
//! keys; command-line flags override file values. The resolved config a
//! run writes next to its outputs is itself a valid input reproducing
//! the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{synth_dataset, load_dataset, load_split, DatasetIndex, SynthConfig, SynthManifest};
use crate::model::{BranchSet, ModelConfig, TinyBackboneConfig};
use crate::objective::{LossWeights, MsLossParams, RankingLoss, ScheduleParams};

use super::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic { ids: usize, per_id: usize },
    Market { root: PathBuf, split: Option<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub branches: BranchSet,
    pub embed_channels: usize,
    pub trunk_channels: Vec<usize>,
    pub drop_ratio: f64,
    /// "auto" resolves to the train identity count.
    pub classes: Option<usize>,

    pub wca: bool,
    pub ranking_ms: bool,
    pub drop_block: bool,
    pub eps_ls: f64,
    pub lambda_ce: f64,
    pub lambda_ms: f64,
    pub ms: MsLossParams,
    pub triplet_margin: f64,
    /// Explicit step-schedule drop epochs; empty means the 50/80/110
    /// defaults scaled to the epoch count.
    pub step_drops: Vec<usize>,

    pub epochs: usize,
    pub warmup: usize,
    pub lr_peak: f64,
    pub lr_start: f64,
    pub lr_floor: f64,

    pub seed: u64,
    pub out_dir: PathBuf,
    pub batch_p: usize,
    pub batch_k: usize,
    pub checkpoint_every: usize,
    pub final_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::Synthetic { ids: 20, per_id: 12 },
            branches: BranchSet::default(),
            embed_channels: 512,
            trunk_channels: vec![8, 16, 32, 64],
            drop_ratio: 1.0 / 3.0,
            classes: None,
            wca: true,
            ranking_ms: true,
            drop_block: true,
            eps_ls: 0.1,
            lambda_ce: 0.5,
            lambda_ms: 0.5,
            ms: MsLossParams::default(),
            triplet_margin: 0.3,
            step_drops: Vec::new(),
            epochs: 140,
            warmup: 10,
            lr_peak: 6e-4,
            lr_start: 6e-5,
            lr_floor: 6e-7,
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            batch_p: 6,
            batch_k: 8,
            checkpoint_every: 20,
            final_eval: true,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() || v.trim() == "auto" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|tok| parse_num(key, tok.trim()))
        .collect()
}

impl RunConfig {
    /// Apply a single `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset.kind" => match v {
                "synthetic" => {
                    if !matches!(self.dataset, DatasetSpec::Synthetic { .. }) {
                        self.dataset = DatasetSpec::Synthetic { ids: 20, per_id: 12 };
                    }
                }
                "market" => {
                    if !matches!(self.dataset, DatasetSpec::Market { .. }) {
                        self.dataset = DatasetSpec::Market {
                            root: PathBuf::new(),
                            split: None,
                        };
                    }
                }
                _ => {
                    return Err(CliError::Usage(format!(
                        "dataset.kind: expected synthetic|market, got '{v}'"
                    )))
                }
            },
            "dataset.ids" => {
                let ids = parse_num(key, v)?;
                match &mut self.dataset {
                    DatasetSpec::Synthetic { ids: slot, .. } => *slot = ids,
                    _ => self.dataset = DatasetSpec::Synthetic { ids, per_id: 12 },
                }
            }
            "dataset.per_id" => {
                let per_id = parse_num(key, v)?;
                match &mut self.dataset {
                    DatasetSpec::Synthetic { per_id: slot, .. } => *slot = per_id,
                    _ => self.dataset = DatasetSpec::Synthetic { ids: 20, per_id },
                }
            }
            "dataset.root" => {
                let root = PathBuf::from(v);
                match &mut self.dataset {
                    DatasetSpec::Market { root: slot, .. } => *slot = root,
                    _ => self.dataset = DatasetSpec::Market { root, split: None },
                }
            }
            "dataset.split" => {
                let split = (!v.is_empty()).then(|| PathBuf::from(v));
                match &mut self.dataset {
                    DatasetSpec::Market { split: slot, .. } => *slot = split,
                    _ => {
                        return Err(CliError::Usage(
                            "dataset.split: set dataset.root first".into(),
                        ))
                    }
                }
            }
            "model.branches" => {
                self.branches = BranchSet::parse(v).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            "model.embed_channels" => self.embed_channels = parse_num(key, v)?,
            "model.trunk_channels" => {
                let list = parse_list(key, v)?;
                if list.is_empty() {
                    return Err(CliError::Usage(
                        "model.trunk_channels: expected a comma-separated list".into(),
                    ));
                }
                self.trunk_channels = list;
            }
            "model.drop_ratio" => self.drop_ratio = parse_num(key, v)?,
            "model.classes" => {
                self.classes = if v == "auto" { None } else { Some(parse_num(key, v)?) };
            }
            "objective.wca" => self.wca = parse_bool(key, v)?,
            "objective.ranking" => {
                self.ranking_ms = match v {
                    "ms" => true,
                    "triplet" => false,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "objective.ranking: expected ms|triplet, got '{v}'"
                        )))
                    }
                }
            }
            "objective.drop_block" => self.drop_block = parse_bool(key, v)?,
            "objective.eps_ls" => self.eps_ls = parse_num(key, v)?,
            "objective.lambda_ce" => self.lambda_ce = parse_num(key, v)?,
            "objective.lambda_ms" => self.lambda_ms = parse_num(key, v)?,
            "objective.ms_alpha" => self.ms.alpha = parse_num(key, v)?,
            "objective.ms_beta" => self.ms.beta = parse_num(key, v)?,
            "objective.ms_margin" => self.ms.margin = parse_num(key, v)?,
            "objective.ms_mining_eps" => self.ms.mining_eps = parse_num(key, v)?,
            "objective.triplet_margin" => self.triplet_margin = parse_num(key, v)?,
            "objective.step_drops" => self.step_drops = parse_list(key, v)?,
            "schedule.epochs" => self.epochs = parse_num(key, v)?,
            "schedule.warmup" => self.warmup = parse_num(key, v)?,
            "schedule.lr_peak" => self.lr_peak = parse_num(key, v)?,
            "schedule.lr_start" => self.lr_start = parse_num(key, v)?,
            "schedule.lr_floor" => self.lr_floor = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.out" => self.out_dir = PathBuf::from(v),
            "train.batch_p" => self.batch_p = parse_num(key, v)?,
            "train.batch_k" => self.batch_k = parse_num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "train.final_eval" => self.final_eval = parse_bool(key, v)?,
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a flat config file: `key = value` lines, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The fully resolved flat key/value view (stable order).
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match &self.dataset {
            DatasetSpec::Synthetic { ids, per_id } => {
                m.insert("dataset.kind".into(), "synthetic".into());
                m.insert("dataset.ids".into(), ids.to_string());
                m.insert("dataset.per_id".into(), per_id.to_string());
            }
            DatasetSpec::Market { root, split } => {
                m.insert("dataset.kind".into(), "market".into());
                m.insert("dataset.root".into(), root.display().to_string());
                m.insert(
                    "dataset.split".into(),
                    split.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                );
            }
        }
        m.insert("model.branches".into(), self.branches.label());
        m.insert("model.embed_channels".into(), self.embed_channels.to_string());
        m.insert(
            "model.trunk_channels".into(),
            self.trunk_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("model.drop_ratio".into(), format!("{:?}", self.drop_ratio));
        m.insert(
            "model.classes".into(),
            self.classes.map(|c| c.to_string()).unwrap_or_else(|| "auto".into()),
        );
        m.insert("objective.wca".into(), self.wca.to_string());
        m.insert(
            "objective.ranking".into(),
            if self.ranking_ms { "ms" } else { "triplet" }.into(),
        );
        m.insert("objective.drop_block".into(), self.drop_block.to_string());
        m.insert("objective.eps_ls".into(), format!("{:?}", self.eps_ls));
        m.insert("objective.lambda_ce".into(), format!("{:?}", self.lambda_ce));
        m.insert("objective.lambda_ms".into(), format!("{:?}", self.lambda_ms));
        m.insert("objective.ms_alpha".into(), format!("{:?}", self.ms.alpha));
        m.insert("objective.ms_beta".into(), format!("{:?}", self.ms.beta));
        m.insert("objective.ms_margin".into(), format!("{:?}", self.ms.margin));
        m.insert(
            "objective.ms_mining_eps".into(),
            format!("{:?}", self.ms.mining_eps),
        );
        m.insert(
            "objective.triplet_margin".into(),
            format!("{:?}", self.triplet_margin),
        );
        m.insert(
            "objective.step_drops".into(),
            if self.step_drops.is_empty() {
                "auto".into()
            } else {
                self.step_drops
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            },
        );
        m.insert("schedule.epochs".into(), self.epochs.to_string());
        m.insert("schedule.warmup".into(), self.warmup.to_string());
        m.insert("schedule.lr_peak".into(), format!("{:?}", self.lr_peak));
        m.insert("schedule.lr_start".into(), format!("{:?}", self.lr_start));
        m.insert("schedule.lr_floor".into(), format!("{:?}", self.lr_floor));
        m.insert("train.seed".into(), self.seed.to_string());
        m.insert("train.out".into(), self.out_dir.display().to_string());
        m.insert("train.batch_p".into(), self.batch_p.to_string());
        m.insert("train.batch_k".into(), self.batch_k.to_string());
        m.insert(
            "train.checkpoint_every".into(),
            self.checkpoint_every.to_string(),
        );
        m.insert("train.final_eval".into(), self.final_eval.to_string());
        m
    }

    pub fn to_flat_file(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_flat_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Market { root, .. } = &self.dataset {
            if root.as_os_str().is_empty() {
                return Err(CliError::Usage("dataset.root: missing path".into()));
            }
        }
        if self.epochs == 0 {
            return Err(CliError::Usage("schedule.epochs: must be positive".into()));
        }
        if self.wca && self.epochs <= self.warmup {
            return Err(CliError::Usage(format!(
                "schedule.epochs: must exceed warmup ({})",
                self.warmup
            )));
        }
        if self.batch_p == 0 || self.batch_k == 0 {
            return Err(CliError::Usage("train.batch_p/train.batch_k: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eps_ls) {
            return Err(CliError::Usage(format!(
                "objective.eps_ls: must lie in [0,1), got {}",
                self.eps_ls
            )));
        }
        if self.lambda_ce < 0.0 || self.lambda_ms < 0.0 {
            return Err(CliError::Usage(
                "objective.lambda_ce/lambda_ms: must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes: classes,
            branches: self.branches,
            backbone: TinyBackboneConfig {
                trunk_channels: self.trunk_channels.clone(),
                embed_channels: self.embed_channels,
            },
            drop_ratio: self.drop_ratio,
            drop_block: self.drop_block,
        }
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            total_epochs: self.epochs,
            warmup_epochs: self.warmup,
            lr_peak: self.lr_peak,
            lr_start: self.lr_start,
            lr_floor: self.lr_floor,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ce: self.lambda_ce,
            lambda_ms: self.lambda_ms,
        }
    }

    pub fn ranking_loss(&self) -> RankingLoss {
        if self.ranking_ms {
            RankingLoss::MultiSimilarity(self.ms)
        } else {
            RankingLoss::TripletBatchHard {
                margin: self.triplet_margin,
            }
        }
    }

    /// The step-schedule drop epochs: explicit when configured, otherwise
    /// the 50/80/110 baseline scaled proportionally (rounded) to the
    /// epoch count.
    pub fn resolved_step_drops(&self) -> Vec<usize> {
        if !self.step_drops.is_empty() {
            return self.step_drops.clone();
        }
        [50usize, 80, 110]
            .iter()
            .map(|&d| ((d as f64 * self.epochs as f64 / 140.0).round() as usize).max(1))
            .collect()
    }

    /// Materialize the dataset this config describes. Synthetic runs also
    /// return the provenance manifest.
    pub fn build_dataset(&self) -> Result<(DatasetIndex, Option<SynthManifest>)> {
        match &self.dataset {
            DatasetSpec::Synthetic { ids, per_id } => {
                let (index, manifest) =
                    synth_dataset(&SynthConfig::new(*ids, *per_id, self.seed))?;
                Ok((index, Some(manifest)))
            }
            DatasetSpec::Market { root, split } => {
                let index = match split {
                    Some(split_path) => load_split(root, split_path)?,
                    None => load_dataset(root)?,
                };
                Ok((index, None))
            }
        }
    }
}
