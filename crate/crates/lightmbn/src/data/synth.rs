//! Synthetic person dataset: per-identity visual signatures (colored
//! head/torso/leg layout with optional stripes) rendered with per-sample
//! jitter, camera tint, and noise. Deterministic for a fixed seed.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_rng, streams, ChannelStats, DataError, DatasetIndex, Image, ImageSource, Result, Role,
    Sample, SampleFlag,
};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_ids: usize, per_id: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_ids,
            per_id,
            height: 384,
            width: 128,
            seed,
        }
    }
}

/// Provenance record written next to runs that used synthetic data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_ids: usize,
    pub per_id: usize,
}

struct IdentitySignature {
    torso: [f64; 3],
    legs: [f64; 3],
    head: [f64; 3],
    stripe: Option<([f64; 3], usize)>,
    torso_width: f64,
    shoulder: f64,
    waist: f64,
    leg_gap: f64,
}

fn sample_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
    ]
}

fn signature(seed: u64, id: usize) -> IdentitySignature {
    let mut rng = derive_rng(seed, streams::SYNTH_ID, id as u64);
    let torso = sample_color(&mut rng);
    let legs = sample_color(&mut rng);
    let tone = rng.random_range(0.55..0.85);
    let head = [tone, tone * rng.random_range(0.85..1.0), tone * 0.8];
    let stripe = if rng.random_range(0.0..1.0) < 0.5 {
        Some((sample_color(&mut rng), rng.random_range(6..16usize)))
    } else {
        None
    };
    IdentitySignature {
        torso,
        legs,
        head,
        stripe,
        torso_width: rng.random_range(0.5..0.8),
        shoulder: rng.random_range(0.16..0.24),
        waist: rng.random_range(0.5..0.6),
        leg_gap: rng.random_range(0.04..0.12),
    }
}

/// Per-camera additive color cast.
const CAM_TINT: [[f64; 3]; 6] = [
    [0.03, 0.0, -0.02],
    [-0.02, 0.02, 0.0],
    [0.0, -0.02, 0.03],
    [0.02, 0.02, -0.03],
    [-0.03, 0.0, 0.02],
    [0.0, 0.03, 0.0],
];

fn render(sig: &IdentitySignature, cfg: &SynthConfig, camid: i64, rng: &mut impl Rng) -> Vec<u8> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Image::new(h, w);

    let base = 0.32 + 0.04 * ((camid - 1) as f64 / 5.0) + rng.random_range(-0.04..0.04);
    for v in img.data.iter_mut() {
        *v = base;
    }

    let dx = rng.random_range(-(w as f64) * 0.05..(w as f64) * 0.05);
    let dy = rng.random_range(-(h as f64) * 0.025..(h as f64) * 0.025);
    let scale = rng.random_range(0.9..1.1);
    let brightness = rng.random_range(0.85..1.15);

    let cx = w as f64 / 2.0 + dx;
    let fill = |y0: f64, y1: f64, half_w: f64, color: [f64; 3], img: &mut Image| {
        let ys = ((y0 * h as f64 * scale + dy).max(0.0) as usize).min(h);
        let ye = ((y1 * h as f64 * scale + dy).max(0.0) as usize).min(h);
        let xs = ((cx - half_w).max(0.0) as usize).min(w);
        let xe = ((cx + half_w).max(0.0) as usize).min(w);
        for y in ys..ye {
            for x in xs..xe {
                for c in 0..3 {
                    img.set(c, y, x, color[c]);
                }
            }
        }
    };

    // head, torso, legs top to bottom
    let head_half = 0.11 * w as f64 * scale;
    fill(0.05, sig.shoulder - 0.02, head_half, sig.head, &mut img);
    let torso_half = sig.torso_width * w as f64 / 2.0 * scale;
    fill(sig.shoulder, sig.waist, torso_half, sig.torso, &mut img);
    let leg_half = (sig.torso_width / 2.0 - sig.leg_gap / 2.0) * w as f64 / 2.0 * scale;
    let gap = sig.leg_gap * w as f64 * scale;
    let leg_off = gap / 2.0 + leg_half;
    let (ys, ye) = (sig.waist, 0.92);
    for side in [-1.0, 1.0] {
        let center = cx + side * leg_off;
        let y0 = ((ys * h as f64 * scale + dy).max(0.0) as usize).min(h);
        let y1 = ((ye * h as f64 * scale + dy).max(0.0) as usize).min(h);
        let x0 = ((center - leg_half).max(0.0) as usize).min(w);
        let x1 = ((center + leg_half).max(0.0) as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    img.set(c, y, x, sig.legs[c]);
                }
            }
        }
    }

    // torso stripes
    if let Some((color, period)) = sig.stripe {
        let ys = ((sig.shoulder * h as f64 * scale + dy).max(0.0) as usize).min(h);
        let ye = ((sig.waist * h as f64 * scale + dy).max(0.0) as usize).min(h);
        let xs = ((cx - torso_half).max(0.0) as usize).min(w);
        let xe = ((cx + torso_half).max(0.0) as usize).min(w);
        for y in ys..ye {
            if (y - ys) / period % 2 == 1 {
                for x in xs..xe {
                    for c in 0..3 {
                        img.set(c, y, x, 0.5 * img.get(c, y, x) + 0.5 * color[c]);
                    }
                }
            }
        }
    }

    // brightness, camera tint, pixel noise, quantize
    let tint = CAM_TINT[(camid - 1) as usize % 6];
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let v = img.data[c * plane + i] * brightness + tint[c] + rng.random_range(-0.02..0.02);
            out[c * plane + i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Generate a synthetic dataset. Roles split disjointly per identity:
/// max(1, per_id/6) query and gallery samples each, the rest train.
/// Camera ids cycle so every query has cross-camera relevants.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(DatasetIndex, SynthManifest)> {
    if cfg.n_ids < 2 {
        return Err(DataError::Config(format!(
            "synthetic dataset needs at least 2 identities, got {}",
            cfg.n_ids
        )));
    }
    if cfg.per_id < 2 {
        return Err(DataError::Config(format!(
            "synthetic dataset needs at least 2 images per identity, got {}",
            cfg.per_id
        )));
    }
    let n_query = (cfg.per_id / 6).max(1);
    let n_gallery = (cfg.per_id / 6).max(1);
    let n_train = cfg.per_id - n_query - n_gallery;

    let mut samples = Vec::with_capacity(cfg.n_ids * cfg.per_id);
    for id in 1..=cfg.n_ids {
        let sig = signature(cfg.seed, id);
        for j in 0..cfg.per_id {
            let camid = ((id + j) % 6 + 1) as i64;
            let mut rng = derive_rng(
                cfg.seed,
                streams::SYNTH_SAMPLE,
                (id as u64) * 1_000_000 + j as u64,
            );
            let rgb = render(&sig, cfg, camid, &mut rng);
            let role = if j < n_train {
                Role::Train
            } else if j < n_train + n_query {
                Role::Query
            } else {
                Role::Gallery
            };
            samples.push(Sample {
                source: ImageSource::Memory {
                    h: cfg.height,
                    w: cfg.width,
                    rgb: Arc::new(rgb),
                },
                pid: id as i64,
                camid,
                role,
                flag: SampleFlag::Normal,
            });
        }
    }

    let stats = compute_train_stats(&samples).unwrap_or_default();
    let manifest = SynthManifest {
        seed: cfg.seed,
        n_ids: cfg.n_ids,
        per_id: cfg.per_id,
    };
    Ok((DatasetIndex::build(samples, stats), manifest))
}

fn compute_train_stats(samples: &[Sample]) -> Option<ChannelStats> {
    let mut count = 0usize;
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    for s in samples.iter().filter(|s| s.role == Role::Train) {
        let ImageSource::Memory { h, w, rgb } = &s.source else {
            continue;
        };
        let plane = h * w;
        for c in 0..3 {
            for &px in &rgb[c * plane..(c + 1) * plane] {
                let v = px as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        count += plane;
    }
    if count == 0 {
        return None;
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count as f64;
        std[c] = (sum_sq[c] / count as f64 - mean[c] * mean[c]).max(1e-12).sqrt();
    }
    Some(ChannelStats { mean, std })
}

/// Write a sample's pixels as a PNG (used by the retrieval CLI tests and
/// for inspecting synthetic identities).
pub fn save_png(source: &ImageSource, path: &Path) -> Result<()> {
    let img = source.load()?;
    let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = [
                (img.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
