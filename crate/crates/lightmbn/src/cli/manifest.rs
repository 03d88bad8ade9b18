//! Run manifest: resolved config, per-epoch loss trace, final metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean combined loss over the epoch's steps.
    pub loss_total: f64,
    /// Mean raw (unweighted) value per term.
    pub loss_terms: BTreeMap<String, f64>,
    pub ce_sum: f64,
    pub rank_sum: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub rank1: f64,
    pub map_modern: f64,
    pub map_legacy: f64,
    pub invalid_queries: usize,
    pub cmc: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    /// Heads feeding the identity loss, in assembly order. The channel
    /// branch contributes two distinct heads (c1, c2).
    pub identity_heads: Vec<String>,
    /// Heads whose pre-BN embeddings feed the ranking loss.
    pub ranking_heads: Vec<String>,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<FinalMetrics>,
    pub checkpoint: Option<String>,
    pub wall_clock_s: f64,
    pub completed: bool,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Data(format!("manifest serialize: {e}")))?;
        std::fs::write(path, json)
            .map_err(|e| CliError::Data(format!("manifest write {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("manifest parse {}: {e}", path.display())))
    }
}
