//! Plot-data exports: schedule, CMC curve, and loss-curve CSVs derived
//! from a run directory's manifest.

use std::path::{Path, PathBuf};

use crate::objective::{lr_schedule, step_schedule};

use super::evalcmd::run_config_of;
use super::manifest::RunManifest;
use super::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Schedule,
    Cmc,
    LossCurve,
}

impl ExportKind {
    pub fn parse(s: &str) -> Result<ExportKind> {
        match s {
            "schedule" => Ok(ExportKind::Schedule),
            "cmc" => Ok(ExportKind::Cmc),
            "loss-curve" => Ok(ExportKind::LossCurve),
            other => Err(CliError::Usage(format!(
                "unknown export '{other}' (expected schedule|cmc|loss-curve)"
            ))),
        }
    }

    fn default_name(&self) -> &'static str {
        match self {
            ExportKind::Schedule => "schedule.csv",
            ExportKind::Cmc => "cmc_export.csv",
            ExportKind::LossCurve => "loss_curve.csv",
        }
    }
}

pub fn cmd_export(kind: ExportKind, run_dir: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let manifest_path = run_dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(CliError::Data(format!(
            "{} has no manifest.json",
            run_dir.display()
        )));
    }
    let manifest = RunManifest::read(&manifest_path)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join(kind.default_name()));

    let csv = match kind {
        ExportKind::Schedule => {
            let cfg = run_config_of(run_dir)?;
            let mut body = String::from("epoch,lr\n");
            if cfg.wca {
                let p = cfg.schedule_params();
                for t in 1..=cfg.epochs {
                    let lr = lr_schedule(t, &p).map_err(|e| CliError::Usage(e.to_string()))?;
                    body.push_str(&format!("{t},{lr:e}\n"));
                }
            } else {
                let drops = cfg.resolved_step_drops();
                for t in 1..=cfg.epochs {
                    body.push_str(&format!("{t},{:e}\n", step_schedule(t, cfg.lr_peak, &drops)));
                }
            }
            body
        }
        ExportKind::Cmc => {
            let metrics = manifest.final_metrics.as_ref().ok_or_else(|| {
                CliError::Data("run has no final metrics — evaluate it first".into())
            })?;
            crate::eval::cmc_csv(&metrics.cmc)
        }
        ExportKind::LossCurve => {
            if manifest.epochs.is_empty() {
                return Err(CliError::Data("run recorded no epochs".into()));
            }
            let term_names: Vec<String> =
                manifest.epochs[0].loss_terms.keys().cloned().collect();
            let mut body = String::from("epoch,lr,total,ce_sum,rank_sum");
            for t in &term_names {
                body.push_str(&format!(",{t}"));
            }
            body.push('\n');
            for e in &manifest.epochs {
                body.push_str(&format!(
                    "{},{:e},{},{},{}",
                    e.epoch, e.lr, e.loss_total, e.ce_sum, e.rank_sum
                ));
                for t in &term_names {
                    body.push_str(&format!(",{}", e.loss_terms.get(t).copied().unwrap_or(0.0)));
                }
                body.push('\n');
            }
            body
        }
    };
    std::fs::write(&out_path, csv)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out_path.display())))?;
    Ok(out_path)
}
