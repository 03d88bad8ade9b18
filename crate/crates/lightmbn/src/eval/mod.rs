//! Retrieval and the full evaluation protocol: cosine similarities, CMC,
//! and mean Average Precision under both the modern and the original
//! trapezoidal conventions, with junk and same-camera exclusion.

mod dump;

#[cfg(test)]
mod tests;

pub use dump::{read_embedding_dump, write_embedding_dump};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::SampleFlag;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero-norm {side} embedding at row {row}")]
    DegenerateEmbedding { side: &'static str, row: usize },
    #[error("empty gallery")]
    EmptyGallery,
    #[error("query has no relevant gallery items after exclusion")]
    NoRelevantItems,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("embedding dump i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding dump format: {0}")]
    DumpFormat(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Identity metadata of one query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalItem {
    pub pid: i64,
    pub camid: i64,
    pub flag: SampleFlag,
}

/// Per-query average precisions; invalid queries (no relevant items after
/// exclusion) carry `valid = false` and are left out of the means.
#[derive(Debug, Clone, Serialize)]
pub struct PerQueryAp {
    pub query: usize,
    pub ap_modern: f64,
    pub ap_legacy: f64,
    pub valid: bool,
}

/// Evaluation outcome: the CMC curve for ranks 1..=50, both mAP
/// conventions, and the per-query detail.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub cmc: Vec<f64>,
    pub map_modern: f64,
    pub map_legacy: f64,
    pub per_query: Vec<PerQueryAp>,
    pub invalid_queries: usize,
}

impl EvalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

pub const CMC_MAX_RANK: usize = 50;

fn normalized_rows(t: &Tensor, side: &'static str) -> Result<Vec<f64>> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &t.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EvalError::DegenerateEmbedding { side, row: i });
        }
        for j in 0..d {
            out[i * d + j] = row[j] / norm;
        }
    }
    Ok(out)
}

/// S[i][j] = ⟨q_i, g_j⟩ / (‖q_i‖‖g_j‖). Zero-norm rows are an error.
pub fn cosine_similarity_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if queries.shape().len() != 2 || gallery.shape().len() != 2 {
        return Err(EvalError::InvalidArgument(format!(
            "expected 2-d embedding matrices, got {:?} and {:?}",
            queries.shape(),
            gallery.shape()
        )));
    }
    if queries.shape()[1] != gallery.shape()[1] {
        return Err(EvalError::InvalidArgument(format!(
            "embedding widths differ: {} vs {}",
            queries.shape()[1],
            gallery.shape()[1]
        )));
    }
    let (m, d) = (queries.shape()[0], queries.shape()[1]);
    let g = gallery.shape()[0];
    let qn = normalized_rows(queries, "query")?;
    let gn = normalized_rows(gallery, "gallery")?;
    let mut sims = vec![0.0; m * g];
    sims.par_chunks_mut(g).enumerate().for_each(|(i, row)| {
        let q = &qn[i * d..(i + 1) * d];
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = q.iter().zip(&gn[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
        }
    });
    Ok(Tensor::from_vec(sims, &[m, g]).expect("matrix shape"))
}

/// Index of the most similar gallery row (cosine), ties broken by the
/// lowest index.
pub fn retrieve(probe: &[f64], gallery: &Tensor) -> Result<usize> {
    if gallery.shape().is_empty() || gallery.shape()[0] == 0 {
        return Err(EvalError::EmptyGallery);
    }
    let probe_t = Tensor::from_vec(probe.to_vec(), &[1, probe.len()])
        .map_err(|e| EvalError::InvalidArgument(e.to_string()))?;
    let sims = cosine_similarity_matrix(&probe_t, gallery)?;
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, &s) in sims.data().iter().enumerate() {
        if s > best_sim {
            best_sim = s;
            best = j;
        }
    }
    Ok(best)
}

/// Modern AP: mean of precision-at-hit over the relevant items.
pub fn ap_modern(order: &[bool]) -> Result<f64> {
    let relevant = order.iter().filter(|&&b| b).count();
    if relevant == 0 {
        return Err(EvalError::NoRelevantItems);
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank0, &rel) in order.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(acc / relevant as f64)
}

/// Legacy AP: the trapezoidal recall–precision accumulation of the
/// original evaluation script. Precision starts at 1.0 and recall at 0.
pub fn ap_legacy(order: &[bool]) -> Result<f64> {
    let relevant = order.iter().filter(|&&b| b).count();
    if relevant == 0 {
        return Err(EvalError::NoRelevantItems);
    }
    let mut old_precision = 1.0;
    let mut old_recall = 0.0;
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &rel) in order.iter().enumerate() {
        if rel {
            hits += 1;
            let precision = hits as f64 / (rank0 + 1) as f64;
            let recall = hits as f64 / relevant as f64;
            ap += (recall - old_recall) * (old_precision + precision) / 2.0;
            old_precision = precision;
            old_recall = recall;
        }
    }
    Ok(ap)
}

/// Full protocol: per query, drop gallery items that are junk or share
/// both the query's identity and camera, rank the rest by descending
/// cosine similarity (ties by gallery index), score relevant = same pid
/// on a different camera. Queries left without relevant items are flagged
/// invalid and excluded from the means but counted.
pub fn evaluate(
    query_emb: &Tensor,
    query_meta: &[EvalItem],
    gallery_emb: &Tensor,
    gallery_meta: &[EvalItem],
) -> Result<EvalResult> {
    let m = query_meta.len();
    let g = gallery_meta.len();
    if query_emb.shape() != [m, query_emb.shape()[1]] || m == 0 {
        return Err(EvalError::InvalidArgument(
            "query embeddings and metadata misaligned or empty".into(),
        ));
    }
    if gallery_emb.shape().first() != Some(&g) || g == 0 {
        return Err(EvalError::EmptyGallery);
    }

    let sims = cosine_similarity_matrix(query_emb, gallery_emb)?;

    struct QueryOutcome {
        first_hit_rank: Option<usize>,
        ap: Option<(f64, f64)>,
    }

    let outcomes: Vec<QueryOutcome> = (0..m)
        .into_par_iter()
        .map(|qi| {
            let q = &query_meta[qi];
            let row = &sims.data()[qi * g..(qi + 1) * g];
            let mut kept: Vec<(usize, f64)> = (0..g)
                .filter(|&j| {
                    let item = &gallery_meta[j];
                    if item.flag == SampleFlag::Junk {
                        return false;
                    }
                    !(item.pid == q.pid && item.camid == q.camid)
                })
                .map(|j| (j, row[j]))
                .collect();
            kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let order: Vec<bool> = kept
                .iter()
                .map(|&(j, _)| {
                    let item = &gallery_meta[j];
                    item.pid == q.pid && item.camid != q.camid
                })
                .collect();
            let first_hit_rank = order.iter().position(|&b| b).map(|p| p + 1);
            let ap = match (ap_modern(&order), ap_legacy(&order)) {
                (Ok(a), Ok(b)) => Some((a, b)),
                _ => None,
            };
            QueryOutcome { first_hit_rank, ap }
        })
        .collect();

    let mut cmc_counts = vec![0usize; CMC_MAX_RANK];
    let mut per_query = Vec::with_capacity(m);
    let mut sum_modern = 0.0;
    let mut sum_legacy = 0.0;
    let mut valid = 0usize;
    for (qi, outcome) in outcomes.iter().enumerate() {
        match outcome.ap {
            Some((am, al)) => {
                valid += 1;
                sum_modern += am;
                sum_legacy += al;
                if let Some(rank) = outcome.first_hit_rank {
                    for k in rank..=CMC_MAX_RANK {
                        cmc_counts[k - 1] += 1;
                    }
                }
                per_query.push(PerQueryAp {
                    query: qi,
                    ap_modern: am,
                    ap_legacy: al,
                    valid: true,
                });
            }
            None => per_query.push(PerQueryAp {
                query: qi,
                ap_modern: 0.0,
                ap_legacy: 0.0,
                valid: false,
            }),
        }
    }
    if valid == 0 {
        return Err(EvalError::NoRelevantItems);
    }
    let cmc: Vec<f64> = cmc_counts
        .iter()
        .map(|&c| c as f64 / valid as f64)
        .collect();
    Ok(EvalResult {
        cmc,
        map_modern: sum_modern / valid as f64,
        map_legacy: sum_legacy / valid as f64,
        per_query,
        invalid_queries: m - valid,
    })
}

/// CSV export of the CMC curve: header `k,cmc`, one row per rank.
pub fn cmc_csv(cmc: &[f64]) -> String {
    let mut out = String::from("k,cmc\n");
    for (k, v) in cmc.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, v));
    }
    out
}

/// JSON summary: rank1 plus the two mAP conventions and the invalid-query
/// count.
pub fn summary_json(result: &EvalResult) -> String {
    serde_json::json!({
        "rank1": result.rank1(),
        "map_modern": result.map_modern,
        "map_legacy": result.map_legacy,
        "invalid_queries": result.invalid_queries,
    })
    .to_string()
}
