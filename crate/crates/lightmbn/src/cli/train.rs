//! The training command: sampler → augmentation → forward → combined
//! loss → backward → Adam, with the per-epoch learning-rate schedule,
//! checkpointing, and an optional final evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{augment, derive_rng, streams, AugmentConfig, DatasetIndex, PkSampler, Role};
use crate::eval::{evaluate, write_embedding_dump, EvalItem, EvalResult};
use crate::model::{build_model, save_checkpoint, Model};
use crate::objective::{lr_schedule, step_schedule, total_loss, Adam, OptimizerParams};
use crate::tensor::{backward, GradTape, Tensor};
use crate::Mode;

use super::config::RunConfig;
use super::manifest::{EpochRecord, FinalMetrics, RunManifest};
use super::{CliError, Result};

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub checkpoint: PathBuf,
}

/// Assemble one batch tensor from dataset positions, with train-mode
/// augmentation driven by counter-derived RNG streams (parallel workers
/// cannot change the result).
fn build_batch(
    index: &DatasetIndex,
    positions: &[usize],
    aug: &AugmentConfig,
    seed: u64,
    epoch: u64,
    batch_no: u64,
) -> Result<Tensor> {
    let n = positions.len();
    let plane = 3 * aug.crop_h * aug.crop_w;
    let mut buf = vec![0.0; n * plane];
    let results: std::result::Result<Vec<()>, CliError> = buf
        .par_chunks_mut(plane)
        .zip(positions.par_iter().enumerate())
        .map(|(dst, (slot, &pos))| {
            let img = index.samples[pos]
                .source
                .load()
                .map_err(|e| CliError::Data(e.to_string()))?;
            let mut rng = derive_rng(
                seed,
                streams::AUGMENT,
                (epoch << 40) | (batch_no << 20) | slot as u64,
            );
            let out = augment(&img, aug, Mode::Train, &mut rng);
            dst.copy_from_slice(&out.data);
            Ok(())
        })
        .collect();
    results?;
    Tensor::from_vec(buf, &[n, 3, aug.crop_h, aug.crop_w])
        .map_err(|e| CliError::Numeric(e.to_string()))
}

/// Infer-mode embeddings for all samples of a role, in index order.
pub fn embed_role(
    model: &Model,
    index: &DatasetIndex,
    role: Role,
    aug: &AugmentConfig,
) -> Result<(Tensor, Vec<EvalItem>)> {
    let positions = index.role_indices(role);
    if positions.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset has no {} samples",
            match role {
                Role::Train => "train",
                Role::Query => "query",
                Role::Gallery => "gallery",
            }
        )));
    }
    let plane = 3 * aug.crop_h * aug.crop_w;
    let width = model.inference_width();
    let mut rows = vec![0.0; positions.len() * width];
    for (chunk_no, chunk) in positions.chunks(32).enumerate() {
        let mut buf = vec![0.0; chunk.len() * plane];
        let prepared: std::result::Result<Vec<()>, CliError> = buf
            .par_chunks_mut(plane)
            .zip(chunk.par_iter())
            .map(|(dst, &pos)| {
                let img = index.samples[pos]
                    .source
                    .load()
                    .map_err(|e| CliError::Data(e.to_string()))?;
                let mut rng = derive_rng(0, streams::AUGMENT, 0);
                let out = augment(&img, aug, Mode::Infer, &mut rng);
                dst.copy_from_slice(&out.data);
                Ok(())
            })
            .collect();
        prepared?;
        let batch = Tensor::from_vec(buf, &[chunk.len(), 3, aug.crop_h, aug.crop_w])
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let emb = model
            .infer_embeddings(&batch)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let offset = chunk_no * 32 * width;
        rows[offset..offset + emb.numel()].copy_from_slice(emb.data());
    }
    let items: Vec<EvalItem> = positions
        .iter()
        .map(|&pos| {
            let s = &index.samples[pos];
            EvalItem {
                pid: s.pid,
                camid: s.camid,
                flag: s.flag,
            }
        })
        .collect();
    let emb = Tensor::from_vec(rows, &[positions.len(), width])
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    Ok((emb, items))
}

/// Run the final evaluation and write its artifacts into `out_dir`.
pub fn run_final_eval(
    model: &Model,
    index: &DatasetIndex,
    aug: &AugmentConfig,
    out_dir: &Path,
) -> Result<EvalResult> {
    let (query_emb, query_items) = embed_role(model, index, Role::Query, aug)?;
    let (gallery_emb, gallery_items) = embed_role(model, index, Role::Gallery, aug)?;
    let result = evaluate(&query_emb, &query_items, &gallery_emb, &gallery_items)
        .map_err(|e| CliError::Numeric(e.to_string()))?;

    std::fs::write(out_dir.join("cmc.csv"), crate::eval::cmc_csv(&result.cmc))
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(out_dir.join("summary.json"), crate::eval::summary_json(&result))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut per_query = String::from("query,ap_modern,ap_legacy,valid\n");
    for q in &result.per_query {
        per_query.push_str(&format!(
            "{},{},{},{}\n",
            q.query, q.ap_modern, q.ap_legacy, q.valid
        ));
    }
    std::fs::write(out_dir.join("per_query.csv"), per_query)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_embedding_dump(&out_dir.join("gallery.emb"), &gallery_items, &gallery_emb)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_embedding_dump(&out_dir.join("query.emb"), &query_items, &query_emb)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(result)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("config.resolved"), cfg.to_flat_file())
        .map_err(|e| CliError::Data(e.to_string()))?;

    let (index, synth_manifest) = cfg.build_dataset()?;
    if let Some(m) = &synth_manifest {
        let json = serde_json::to_string_pretty(m).expect("manifest serializes");
        std::fs::write(out_dir.join("synth_manifest.json"), json)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    if index.role_indices(Role::Train).is_empty() {
        return Err(CliError::Data("dataset has no train samples".into()));
    }

    let classes = match cfg.classes {
        Some(k) => k,
        None => index.num_classes(),
    };
    let model_cfg = cfg.model_config(classes);
    let mut rng = derive_rng(cfg.seed, streams::MODEL_INIT, 0);
    let mut model =
        build_model(&model_cfg, &mut rng).map_err(|e| CliError::Usage(e.to_string()))?;

    let sampler = PkSampler::new(&index, cfg.batch_p, cfg.batch_k, cfg.seed)?;
    let aug = AugmentConfig {
        stats: index.stats,
        ..AugmentConfig::default()
    };
    let schedule = cfg.schedule_params();
    let step_drops = cfg.resolved_step_drops();
    let mut adam = Adam::new(OptimizerParams::default());
    let weights = cfg.loss_weights();
    let ranking = cfg.ranking_loss();

    let mut manifest = RunManifest {
        config: cfg.entries(),
        identity_heads: model.head_names().iter().map(|s| s.to_string()).collect(),
        ranking_heads: model
            .ranking_head_names()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        param_count: model.param_count(),
        epochs: Vec::new(),
        final_metrics: None,
        checkpoint: None,
        wall_clock_s: 0.0,
        completed: false,
    };
    let manifest_path = out_dir.join("manifest.json");

    for epoch in 1..=cfg.epochs {
        let epoch_started = Instant::now();
        let lr = if cfg.wca {
            lr_schedule(epoch, &schedule).map_err(|e| CliError::Usage(e.to_string()))?
        } else {
            step_schedule(epoch, cfg.lr_peak, &step_drops)
        };

        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut rank_sum = 0.0;
        let batches = sampler.epoch(epoch as u64);
        let steps = batches.len();
        for (batch_no, spec) in batches.into_iter().enumerate() {
            let batch = build_batch(&index, &spec.positions, &aug, cfg.seed, epoch as u64, batch_no as u64)?;
            let mut tape = GradTape::recording();
            let bundle = model
                .forward(&mut tape, &batch, Mode::Train)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            let (loss, breakdown) = total_loss(
                &mut tape,
                &bundle,
                &spec.labels,
                &weights,
                &ranking,
                cfg.eps_ls,
            )
            .map_err(|e| CliError::Numeric(e.to_string()))?;

            if !loss.item().is_finite() {
                let diag = serde_json::json!({
                    "epoch": epoch,
                    "batch": batch_no,
                    "lr": lr,
                    "loss": format!("{}", loss.item()),
                    "terms": breakdown.terms.iter().cloned().collect::<BTreeMap<_, _>>(),
                });
                let _ = std::fs::write(
                    out_dir.join("diagnostic.json"),
                    serde_json::to_string_pretty(&diag).expect("diagnostic serializes"),
                );
                manifest.wall_clock_s = started.elapsed().as_secs_f64();
                manifest.write(&manifest_path)?;
                return Err(CliError::Numeric(format!(
                    "loss became non-finite at epoch {epoch} batch {batch_no}; diagnostic written to {}",
                    out_dir.join("diagnostic.json").display()
                )));
            }

            backward(&loss, &tape).map_err(|e| CliError::Numeric(e.to_string()))?;
            adam.step(model.named_params_mut(), lr)
                .map_err(|e| CliError::Numeric(e.to_string()))?;

            total_sum += breakdown.total;
            ce_sum += breakdown.ce_sum;
            rank_sum += breakdown.rank_sum;
            for (name, v) in breakdown.terms {
                *term_sums.entry(name).or_insert(0.0) += v;
            }
        }

        let inv = 1.0 / steps.max(1) as f64;
        manifest.epochs.push(EpochRecord {
            epoch,
            lr,
            steps,
            loss_total: total_sum * inv,
            loss_terms: term_sums.into_iter().map(|(k, v)| (k, v * inv)).collect(),
            ce_sum: ce_sum * inv,
            rank_sum: rank_sum * inv,
            wall_s: epoch_started.elapsed().as_secs_f64(),
        });
        manifest.wall_clock_s = started.elapsed().as_secs_f64();
        manifest.write(&manifest_path)?;

        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
            save_checkpoint(&model, &out_dir.join(format!("checkpoint_ep{epoch}.lmbn")))
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }

    let checkpoint = out_dir.join("checkpoint.lmbn");
    save_checkpoint(&model, &checkpoint).map_err(|e| CliError::Data(e.to_string()))?;
    manifest.checkpoint = Some(checkpoint.display().to_string());

    let has_eval_data = !index.role_indices(Role::Query).is_empty()
        && !index.role_indices(Role::Gallery).is_empty();
    if cfg.final_eval && has_eval_data {
        let result = run_final_eval(&model, &index, &aug, &out_dir)?;
        manifest.final_metrics = Some(FinalMetrics {
            rank1: result.rank1(),
            map_modern: result.map_modern,
            map_legacy: result.map_legacy,
            invalid_queries: result.invalid_queries,
            cmc: result.cmc.clone(),
        });
    }

    manifest.completed = true;
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path)?;
    Ok(TrainOutcome {
        out_dir,
        manifest,
        checkpoint,
    })
}
