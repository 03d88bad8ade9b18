//! Train/eval preprocessing: bilinear resize, random crop, horizontal
//! flip, channel normalization, and random erasing.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::Mode;

use super::{ChannelStats, Image};

#[derive(Debug, Clone, Copy)]
pub struct ReaConfig {
    pub p: f64,
    /// erased-area fraction bounds
    pub area: (f64, f64),
    /// aspect-ratio bounds
    pub aspect: (f64, f64),
}

impl Default for ReaConfig {
    fn default() -> Self {
        ReaConfig {
            p: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 10.0 / 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub resize_factor: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip_p: f64,
    pub rea: ReaConfig,
    pub stats: ChannelStats,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_factor: 1.05,
            crop_h: 384,
            crop_w: 128,
            hflip_p: 0.5,
            rea: ReaConfig::default(),
            stats: ChannelStats::default(),
        }
    }
}

/// Half-pixel-aligned bilinear resize.
pub fn resize_bilinear(img: &Image, dh: usize, dw: usize) -> Image {
    if img.h == dh && img.w == dw {
        return img.clone();
    }
    let mut out = Image::new(dh, dw);
    let sy = img.h as f64 / dh as f64;
    let sx = img.w as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let v = img.get(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + img.get(c, y0, x1) * (1.0 - wy) * wx
                    + img.get(c, y1, x0) * wy * (1.0 - wx)
                    + img.get(c, y1, x1) * wy * wx;
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Mirror the image left-right. Involutive: hflip(hflip(x)) == x.
pub fn hflip(img: &Image) -> Image {
    let mut out = Image::new(img.h, img.w);
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                out.set(c, y, x, img.get(c, y, img.w - 1 - x));
            }
        }
    }
    out
}

/// (x − mean) / std per channel, in place.
pub fn normalize(img: &mut Image, stats: &ChannelStats) {
    let plane = img.h * img.w;
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut img.data[c * plane..(c + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
}

/// Fill the rectangle with the image's current per-channel mean.
pub fn erase_rect(img: &mut Image, r0: usize, c0: usize, rh: usize, rw: usize) {
    let means = img.channel_means();
    for c in 0..3 {
        for y in r0..r0 + rh {
            for x in c0..c0 + rw {
                img.set(c, y, x, means[c]);
            }
        }
    }
}

/// With probability p, erase one rectangle whose area fraction and aspect
/// ratio fall within the configured bounds (up to 100 attempts to find a
/// fitting rectangle), filling it with the per-channel mean of the current
/// image. Returns the applied rectangle.
pub fn random_erasing(
    img: &mut Image,
    rea: &ReaConfig,
    rng: &mut ChaCha12Rng,
) -> Option<(usize, usize, usize, usize)> {
    if rng.random_range(0.0..1.0) >= rea.p {
        return None;
    }
    let (h, w) = (img.h, img.w);
    let area = (h * w) as f64;
    for _ in 0..100 {
        let frac = rng.random_range(rea.area.0..rea.area.1);
        let aspect = rng.random_range(rea.aspect.0..rea.aspect.1);
        let rh = (frac * area * aspect).sqrt().round() as usize;
        let rw = (frac * area / aspect).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh > h || rw > w {
            continue;
        }
        // rounding can push the realized fraction past the bounds
        let realized = (rh * rw) as f64 / area;
        if realized < rea.area.0 || realized > rea.area.1 {
            continue;
        }
        let r0 = rng.random_range(0..=h - rh);
        let c0 = rng.random_range(0..=w - rw);
        erase_rect(img, r0, c0, rh, rw);
        return Some((r0, c0, rh, rw));
    }
    None
}

/// Full augmentation pipeline. Train mode: resize to
/// round(factor·crop_h)×round(factor·crop_w), uniform random crop, flip
/// with probability hflip_p, normalize, then random erasing. Eval mode:
/// resize to the crop size and normalize only (deterministic).
pub fn augment(img: &Image, cfg: &AugmentConfig, mode: Mode, rng: &mut ChaCha12Rng) -> Image {
    match mode {
        Mode::Infer => {
            let mut out = resize_bilinear(img, cfg.crop_h, cfg.crop_w);
            normalize(&mut out, &cfg.stats);
            out
        }
        Mode::Train => {
            let rh = (cfg.resize_factor * cfg.crop_h as f64).round() as usize;
            let rw = (cfg.resize_factor * cfg.crop_w as f64).round() as usize;
            let resized = resize_bilinear(img, rh, rw);
            let dy = rng.random_range(0..=rh - cfg.crop_h);
            let dx = rng.random_range(0..=rw - cfg.crop_w);
            let mut out = Image::new(cfg.crop_h, cfg.crop_w);
            for c in 0..3 {
                for y in 0..cfg.crop_h {
                    for x in 0..cfg.crop_w {
                        out.set(c, y, x, resized.get(c, y + dy, x + dx));
                    }
                }
            }
            if rng.random_range(0.0..1.0) < cfg.hflip_p {
                out = hflip(&out);
            }
            normalize(&mut out, &cfg.stats);
            random_erasing(&mut out, &cfg.rea, rng);
            out
        }
    }
}
