//! The three loss functions, each recorded on the tape with a hand-derived
//! adjoint: cross-entropy with label smoothing, multi-similarity, and
//! batch-hard triplet.

use crate::tensor::{GradTape, TapeOp, Tensor};

use super::{MsLossParams, ObjectiveError, Result};

// ---------------------------------------------------------------------------
// cross-entropy with label smoothing

struct CeLabelSmoothingOp {
    logits: Tensor,
    labels: Vec<usize>,
    eps_ls: f64,
    out: Tensor,
}

fn log_softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        for j in 0..k {
            out[i * k + j] = row[j] - lse;
        }
    }
    out
}

impl TapeOp for CeLabelSmoothingOp {
    fn name(&self) -> &'static str {
        "ce_label_smoothing"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.logits]
    }
    fn output(&self) -> &Tensor {
        &self.out
    }
    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, k) = (self.logits.shape()[0], self.logits.shape()[1]);
        let logp = log_softmax_rows(self.logits.data(), n, k);
        let g = grad_out[0] / n as f64;
        let uniform = self.eps_ls / k as f64;
        let mut dz = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let p = logp[i * k + j].exp();
                let q = uniform + if j == self.labels[i] { 1.0 - self.eps_ls } else { 0.0 };
                dz[i * k + j] = g * (p - q);
            }
        }
        vec![Some(dz)]
    }
}

/// Cross-entropy against the smoothed target q_k = (1-eps)·1[k=y] + eps/K,
/// averaged over the batch. Uses a numerically stable log-softmax.
pub fn ce_label_smoothing(
    tape: &mut GradTape,
    logits: &Tensor,
    labels: &[usize],
    eps_ls: f64,
) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(ObjectiveError::InvalidArgument(format!(
            "ce_label_smoothing expects N×K logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(ObjectiveError::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if !(0.0..1.0).contains(&eps_ls) {
        return Err(ObjectiveError::InvalidArgument(format!(
            "eps_ls must lie in [0,1), got {eps_ls}"
        )));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(ObjectiveError::LabelOutOfRange {
                row,
                label,
                classes: k,
            });
        }
    }

    let logp = log_softmax_rows(logits.data(), n, k);
    let uniform = eps_ls / k as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let mut li = 0.0;
        for j in 0..k {
            let q = uniform + if j == labels[i] { 1.0 - eps_ls } else { 0.0 };
            li -= q * logp[i * k + j];
        }
        loss += li;
    }
    loss /= n as f64;

    let requires = logits.requires_grad();
    let out = Tensor::from_op(vec![loss], vec![], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(CeLabelSmoothingOp {
            logits: logits.clone(),
            labels: labels.to_vec(),
            eps_ls,
            out: out.clone(),
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// multi-similarity loss

struct MsInternals {
    /// row-normalized embeddings
    nhat: Vec<f64>,
    norms: Vec<f64>,
    /// cosine similarity matrix N×N
    sim: Vec<f64>,
    /// per anchor: mined positive indices, mined negative indices
    mined: Vec<(Vec<usize>, Vec<usize>)>,
    loss: f64,
}

fn ms_internals(emb: &[f64], n: usize, d: usize, labels: &[usize], p: &MsLossParams) -> MsInternals {
    let mut norms = vec![0.0; n];
    let mut nhat = vec![0.0; n * d];
    for i in 0..n {
        let row = &emb[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms[i] = norm;
        for j in 0..d {
            nhat[i * d + j] = row[j] / norm;
        }
    }
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let s: f64 = nhat[i * d..(i + 1) * d]
                .iter()
                .zip(&nhat[k * d..(k + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            sim[i * n + k] = s;
            sim[k * n + i] = s;
        }
    }

    let mut mined = Vec::with_capacity(n);
    let mut loss = 0.0;
    for i in 0..n {
        let mut max_neg = f64::NEG_INFINITY;
        let mut min_pos = f64::INFINITY;
        for k in 0..n {
            if k == i {
                continue;
            }
            let s = sim[i * n + k];
            if labels[k] == labels[i] {
                min_pos = min_pos.min(s);
            } else {
                max_neg = max_neg.max(s);
            }
        }
        // an empty opposite set leaves the threshold at ±inf, which mines
        // nothing — anchors without both kinds of pairs contribute 0
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for k in 0..n {
            if k == i {
                continue;
            }
            let s = sim[i * n + k];
            if labels[k] == labels[i] {
                if s < max_neg + p.mining_eps {
                    pos.push(k);
                }
            } else if s > min_pos - p.mining_eps {
                neg.push(k);
            }
        }
        let pos_sum: f64 = pos
            .iter()
            .map(|&k| (-p.alpha * (sim[i * n + k] - p.margin)).exp())
            .sum();
        let neg_sum: f64 = neg
            .iter()
            .map(|&k| (p.beta * (sim[i * n + k] - p.margin)).exp())
            .sum();
        loss += (1.0 / p.alpha) * pos_sum.ln_1p() + (1.0 / p.beta) * neg_sum.ln_1p();
        mined.push((pos, neg));
    }
    loss /= n as f64;

    MsInternals {
        nhat,
        norms,
        sim,
        mined,
        loss,
    }
}

struct MsLossOp {
    emb: Tensor,
    labels: Vec<usize>,
    params: MsLossParams,
    out: Tensor,
}

impl TapeOp for MsLossOp {
    fn name(&self) -> &'static str {
        "ms_loss"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.emb]
    }
    fn output(&self) -> &Tensor {
        &self.out
    }
    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, d) = (self.emb.shape()[0], self.emb.shape()[1]);
        let p = &self.params;
        let it = ms_internals(self.emb.data(), n, d, &self.labels, p);
        let g0 = grad_out[0] / n as f64;

        // dL/dS as a sparse-ish matrix over mined pairs
        let mut gs = vec![0.0; n * n];
        for (i, (pos, neg)) in it.mined.iter().enumerate() {
            let pos_sum: f64 = pos
                .iter()
                .map(|&k| (-p.alpha * (it.sim[i * n + k] - p.margin)).exp())
                .sum();
            let neg_sum: f64 = neg
                .iter()
                .map(|&k| (p.beta * (it.sim[i * n + k] - p.margin)).exp())
                .sum();
            for &k in pos {
                let e = (-p.alpha * (it.sim[i * n + k] - p.margin)).exp();
                gs[i * n + k] += g0 * (-e / (1.0 + pos_sum));
            }
            for &k in neg {
                let e = (p.beta * (it.sim[i * n + k] - p.margin)).exp();
                gs[i * n + k] += g0 * (e / (1.0 + neg_sum));
            }
        }

        // S = Ê Êᵀ, so dL/dÊ = (G + Gᵀ) Ê
        let mut dnhat = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..n {
                let coeff = gs[i * n + k] + gs[k * n + i];
                if coeff == 0.0 {
                    continue;
                }
                for j in 0..d {
                    dnhat[i * d + j] += coeff * it.nhat[k * d + j];
                }
            }
        }

        // unit-normalization adjoint: de = (dê − ê (ê·dê)) / ‖e‖
        let mut de = vec![0.0; n * d];
        for i in 0..n {
            let nh = &it.nhat[i * d..(i + 1) * d];
            let dn = &dnhat[i * d..(i + 1) * d];
            let dot: f64 = nh.iter().zip(dn).map(|(a, b)| a * b).sum();
            for j in 0..d {
                de[i * d + j] = (dn[j] - nh[j] * dot) / it.norms[i];
            }
        }
        vec![Some(de)]
    }
}

/// Multi-similarity loss over a labeled batch of embeddings, which are
/// L2-normalized internally before cosine similarities. Pair mining keeps
/// positives harder than the hardest negative (minus the mining epsilon)
/// and vice versa; anchors left with no mined pairs contribute zero.
pub fn ms_loss(
    tape: &mut GradTape,
    embeddings: &Tensor,
    labels: &[usize],
    params: &MsLossParams,
) -> Result<Tensor> {
    if embeddings.shape().len() != 2 {
        return Err(ObjectiveError::InvalidArgument(format!(
            "ms_loss expects N×D embeddings, got {:?}",
            embeddings.shape()
        )));
    }
    let (n, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    if n < 2 {
        return Err(ObjectiveError::BatchStructure(format!(
            "ms_loss needs at least 2 embeddings, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(ObjectiveError::InvalidArgument(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if params.alpha <= 0.0 || params.beta <= 0.0 {
        return Err(ObjectiveError::InvalidArgument(
            "ms_loss alpha and beta must be positive".into(),
        ));
    }

    let it = ms_internals(embeddings.data(), n, d, labels, params);
    let requires = embeddings.requires_grad();
    let out = Tensor::from_op(vec![it.loss], vec![], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(MsLossOp {
            emb: embeddings.clone(),
            labels: labels.to_vec(),
            params: *params,
            out: out.clone(),
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// batch-hard triplet loss

struct TripletOp {
    emb: Tensor,
    margin: f64,
    /// per anchor: (hardest positive, hardest negative), for active anchors
    selected: Vec<Option<(usize, usize)>>,
    out: Tensor,
}

impl TapeOp for TripletOp {
    fn name(&self) -> &'static str {
        "triplet_batch_hard"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.emb]
    }
    fn output(&self) -> &Tensor {
        &self.out
    }
    fn grad_inputs(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, d) = (self.emb.shape()[0], self.emb.shape()[1]);
        let e = self.emb.data();
        let g0 = grad_out[0] / n as f64;
        let mut de = vec![0.0; n * d];
        let mut route = |i: usize, k: usize, sign: f64| {
            let (a, b) = (&e[i * d..(i + 1) * d], &e[k * d..(k + 1) * d]);
            let dist: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dist == 0.0 {
                return; // subgradient 0 at coincident points
            }
            for j in 0..d {
                let u = (a[j] - b[j]) / dist;
                de[i * d + j] += sign * g0 * u;
                de[k * d + j] -= sign * g0 * u;
            }
        };
        for (i, sel) in self.selected.iter().enumerate() {
            if let Some((hp, hn)) = sel {
                route(i, *hp, 1.0);
                route(i, *hn, -1.0);
            }
        }
        let _ = self.margin;
        vec![Some(de)]
    }
}

/// Batch-hard triplet loss: per anchor, the hinge between the farthest
/// same-label and the nearest different-label embedding (Euclidean).
/// Requires every identity in the batch to have at least two samples and
/// at least two identities present.
pub fn triplet_batch_hard(
    tape: &mut GradTape,
    embeddings: &Tensor,
    labels: &[usize],
    margin: f64,
) -> Result<Tensor> {
    if embeddings.shape().len() != 2 {
        return Err(ObjectiveError::InvalidArgument(format!(
            "triplet_batch_hard expects N×D embeddings, got {:?}",
            embeddings.shape()
        )));
    }
    let (n, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    if labels.len() != n {
        return Err(ObjectiveError::InvalidArgument(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().cloned().collect();
    if distinct.len() < 2 {
        return Err(ObjectiveError::BatchStructure(
            "need at least 2 distinct identities".into(),
        ));
    }
    for lbl in &distinct {
        if labels.iter().filter(|&l| l == lbl).count() < 2 {
            return Err(ObjectiveError::BatchStructure(format!(
                "identity {lbl} has fewer than 2 samples in the batch"
            )));
        }
    }

    let e = embeddings.data();
    let dist = |i: usize, k: usize| -> f64 {
        e[i * d..(i + 1) * d]
            .iter()
            .zip(&e[k * d..(k + 1) * d])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    let mut loss = 0.0;
    let mut selected = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp = usize::MAX;
        let mut dp = f64::NEG_INFINITY;
        let mut hn = usize::MAX;
        let mut dn = f64::INFINITY;
        for k in 0..n {
            if k == i {
                continue;
            }
            let dk = dist(i, k);
            if labels[k] == labels[i] {
                if dk > dp {
                    dp = dk;
                    hp = k;
                }
            } else if dk < dn {
                dn = dk;
                hn = k;
            }
        }
        let hinge = (dp - dn + margin).max(0.0);
        loss += hinge;
        selected.push(if hinge > 0.0 { Some((hp, hn)) } else { None });
    }
    loss /= n as f64;

    let requires = embeddings.requires_grad();
    let out = Tensor::from_op(vec![loss], vec![], requires && tape.is_recording());
    if tape.is_recording() && requires {
        tape.push(Box::new(TripletOp {
            emb: embeddings.clone(),
            margin,
            selected,
            out: out.clone(),
        }));
    }
    Ok(out)
}
