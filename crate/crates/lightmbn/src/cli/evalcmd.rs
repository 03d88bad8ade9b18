//! Evaluation and retrieval commands.

use std::path::{Path, PathBuf};

use crate::data::AugmentConfig;
use crate::eval::{read_embedding_dump, EvalResult};
use crate::model::{build_model, load_checkpoint, Model};
use crate::data::{derive_rng, streams, DatasetIndex, ImageSource, Role};

use super::config::RunConfig;
use super::train::run_final_eval;
use super::{CliError, Result};

/// Rebuild the model a run directory describes and load its checkpoint.
pub fn restore_model(cfg: &RunConfig, index: &DatasetIndex, checkpoint: &Path) -> Result<Model> {
    let classes = match cfg.classes {
        Some(k) => k,
        None => index.num_classes(),
    };
    let mut rng = derive_rng(cfg.seed, streams::MODEL_INIT, 0);
    let mut model = build_model(&cfg.model_config(classes), &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    load_checkpoint(&mut model, checkpoint).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(model)
}

pub fn run_config_of(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join("config.resolved");
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "{} has no config.resolved — not a run directory?",
            run_dir.display()
        )));
    }
    RunConfig::from_flat_file(&path)
}

pub fn cmd_eval(
    run_dir: &Path,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<EvalResult> {
    let cfg = run_config_of(run_dir)?;
    let (index, _) = cfg.build_dataset()?;
    if index.role_indices(Role::Query).is_empty() {
        return Err(CliError::Usage("dataset has no query samples".into()));
    }
    if index.role_indices(Role::Gallery).is_empty() {
        return Err(CliError::Usage("dataset has no gallery samples".into()));
    }
    let default_ckpt = run_dir.join("checkpoint.lmbn");
    let ckpt = checkpoint.unwrap_or(&default_ckpt);
    let model = restore_model(&cfg, &index, ckpt)?;

    let out_dir: PathBuf = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("eval"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let aug = AugmentConfig {
        stats: index.stats,
        ..AugmentConfig::default()
    };
    let result = run_final_eval(&model, &index, &aug, &out_dir)?;
    println!(
        "rank1={:.6} map_modern={:.6} map_legacy={:.6} invalid_queries={}",
        result.rank1(),
        result.map_modern,
        result.map_legacy,
        result.invalid_queries
    );
    Ok(result)
}

pub struct RetrievalRow {
    pub rank: usize,
    pub gallery_index: usize,
    pub pid: i64,
    pub camid: i64,
    pub similarity: f64,
}

pub fn cmd_retrieve(
    run_dir: &Path,
    probe: &Path,
    gallery_dump: &Path,
    top_k: usize,
) -> Result<Vec<RetrievalRow>> {
    let cfg = run_config_of(run_dir)?;
    let (index, _) = cfg.build_dataset()?;
    let model = restore_model(&cfg, &index, &run_dir.join("checkpoint.lmbn"))?;

    if !probe.is_file() {
        return Err(CliError::Data(format!(
            "cannot read probe image {}",
            probe.display()
        )));
    }
    let img = ImageSource::Disk(probe.to_path_buf())
        .load()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let aug = AugmentConfig {
        stats: index.stats,
        ..AugmentConfig::default()
    };
    let mut rng = derive_rng(0, streams::AUGMENT, 0);
    let prepared = crate::data::augment(&img, &aug, crate::Mode::Infer, &mut rng);
    let batch = crate::tensor::Tensor::from_vec(
        prepared.data,
        &[1, 3, aug.crop_h, aug.crop_w],
    )
    .map_err(|e| CliError::Numeric(e.to_string()))?;
    let emb = model
        .infer_embeddings(&batch)
        .map_err(|e| CliError::Numeric(e.to_string()))?;

    let (items, gallery) =
        read_embedding_dump(gallery_dump).map_err(|e| CliError::Data(e.to_string()))?;
    if items.is_empty() {
        return Err(CliError::Data("gallery dump is empty".into()));
    }
    let sims = crate::eval::cosine_similarity_matrix(&emb, &gallery)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut ranked: Vec<(usize, f64)> = sims.data().iter().cloned().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(top_k.min(items.len()));

    let rows: Vec<RetrievalRow> = ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (j, sim))| RetrievalRow {
            rank: rank + 1,
            gallery_index: j,
            pid: items[j].pid,
            camid: items[j].camid,
            similarity: sim,
        })
        .collect();
    for row in &rows {
        println!(
            "{:>4}  gallery[{}]  pid={} cam={}  sim={:.6}",
            row.rank, row.gallery_index, row.pid, row.camid, row.similarity
        );
    }
    Ok(rows)
}
