//! Stochastic two-view augmentation pipeline.
//!
//! Per image: random resized crop, horizontal flip, color jitter, random
//! grayscale, gaussian blur, solarization — the Barlow-Twins-style recipe,
//! with jitter strengths (0.4, 0.4, 0.2, 0.1) fixed and every probability
//! exposed on the policy. The solarize probability itself is drawn uniformly
//! from a range once per view draw. Color ops only apply to 3-channel
//! inputs.
//!
//! All draws come from the caller's seeded stream; identical seeds give
//! bit-identical outputs.

use crate::data::episode::EpisodeTask;
use crate::error::{Error, Result};
use crate::seeding;
use ndarray::{Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BRIGHTNESS_STRENGTH: f64 = 0.4;
const CONTRAST_STRENGTH: f64 = 0.4;
const SATURATION_STRENGTH: f64 = 0.2;
const HUE_STRENGTH: f64 = 0.1;
const SOLARIZE_THRESHOLD: f64 = 0.5;
const CROP_ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Area fraction range for the random resized crop.
    pub crop_scale: (f64, f64),
    pub color_jitter_prob: f64,
    pub hflip_prob: f64,
    pub grayscale_prob: f64,
    pub gaussian_blur_prob: f64,
    /// The applied probability is drawn uniformly from this range per view.
    pub solarize_prob: (f64, f64),
}

impl AugmentationPolicy {
    /// The meta-training recipe: crop 0.08-1.0, jitter 0.8, flip 0.5,
    /// grayscale 0.2, blur 0.0, solarize 0.0-0.2.
    pub fn training_default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.08, 1.0),
            color_jitter_prob: 0.8,
            hflip_prob: 0.5,
            grayscale_prob: 0.2,
            gaussian_blur_prob: 0.0,
            solarize_prob: (0.0, 0.2),
        }
    }

    /// No-op policy: output equals input.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            color_jitter_prob: 0.0,
            hflip_prob: 0.0,
            grayscale_prob: 0.0,
            gaussian_blur_prob: 0.0,
            solarize_prob: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.color_jitter_prob,
            self.hflip_prob,
            self.grayscale_prob,
            self.gaussian_blur_prob,
            self.solarize_prob.0,
            self.solarize_prob.1,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must be in [0,1]".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range ({lo}, {hi}) must sit within (0, 1]"
            )));
        }
        if self.solarize_prob.0 > self.solarize_prob.1 {
            return Err(Error::Config("solarize probability range inverted".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.crop_scale == (1.0, 1.0)
            && self.color_jitter_prob == 0.0
            && self.hflip_prob == 0.0
            && self.grayscale_prob == 0.0
            && self.gaussian_blur_prob == 0.0
            && self.solarize_prob == (0.0, 0.0)
    }
}

fn luma(r: f64, gch: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * gch + 0.114 * b
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Bilinear sample of channel plane at fractional position.
fn bilinear(img: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let h = img.shape()[1];
    let w = img.shape()[2];
    let y0 = (y.floor() as isize).clamp(0, h as isize - 1) as usize;
    let x0 = (x.floor() as isize).clamp(0, w as isize - 1) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64).clamp(0.0, 1.0);
    let fx = (x - x0 as f64).clamp(0.0, 1.0);
    let top = img[[c, y0, x0]] * (1.0 - fx) + img[[c, y0, x1]] * fx;
    let bot = img[[c, y1, x0]] * (1.0 - fx) + img[[c, y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn random_resized_crop(
    img: &Array3<f64>,
    scale: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let area = (h * w) as f64;
    let mut crop = None;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(scale.0..=scale.1);
        let log_lo = CROP_ASPECT_RANGE.0.ln();
        let log_hi = CROP_ASPECT_RANGE.1.ln();
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=(h - ch));
            let left = rng.random_range(0..=(w - cw));
            crop = Some((top, left, ch, cw));
            break;
        }
    }
    // torchvision-style fallback: whole image (identity crop).
    let (top, left, ch, cw) = crop.unwrap_or((0, 0, h, w));
    if (top, left, ch, cw) == (0, 0, h, w) {
        return img.clone();
    }
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                // Map output pixel centres onto the crop rectangle.
                let sy = top as f64 + (oy as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
                let sx = left as f64 + (ox as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                out[[ci, oy, ox]] = bilinear(img, ci, sy, sx);
            }
        }
    }
    out
}

fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(Axis(2));
    out
}

fn color_jitter(img: &mut Array3<f64>, rng: &mut ChaCha8Rng) {
    let fb = rng.random_range(1.0 - BRIGHTNESS_STRENGTH..=1.0 + BRIGHTNESS_STRENGTH);
    let fc = rng.random_range(1.0 - CONTRAST_STRENGTH..=1.0 + CONTRAST_STRENGTH);
    let fs = rng.random_range(1.0 - SATURATION_STRENGTH..=1.0 + SATURATION_STRENGTH);
    let fh = rng.random_range(-HUE_STRENGTH..=HUE_STRENGTH);

    // Brightness.
    img.mapv_inplace(|x| clamp01(x * fb));
    // Contrast around the mean gray level.
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut mean_gray = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean_gray += luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
        }
    }
    mean_gray /= (h * w) as f64;
    img.mapv_inplace(|x| clamp01((x - mean_gray) * fc + mean_gray));
    // Saturation towards per-pixel luma.
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for ch in 0..3 {
                img[[ch, y, x]] = clamp01(l + (img[[ch, y, x]] - l) * fs);
            }
        }
    }
    // Hue rotation in the YIQ chroma plane.
    let angle = fh * std::f64::consts::TAU;
    let (cos_a, sin_a) = (angle.cos(), angle.sin());
    for y in 0..h {
        for x in 0..w {
            let (r, gc, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let yy = 0.299 * r + 0.587 * gc + 0.114 * b;
            let i = 0.596 * r - 0.274 * gc - 0.322 * b;
            let q = 0.211 * r - 0.523 * gc + 0.312 * b;
            let i2 = i * cos_a - q * sin_a;
            let q2 = i * sin_a + q * cos_a;
            img[[0, y, x]] = clamp01(yy + 0.956 * i2 + 0.621 * q2);
            img[[1, y, x]] = clamp01(yy - 0.272 * i2 - 0.647 * q2);
            img[[2, y, x]] = clamp01(yy - 1.106 * i2 + 1.703 * q2);
        }
    }
}

fn grayscale(img: &mut Array3<f64>) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for c in 0..3 {
                img[[c, y, x]] = l;
            }
        }
    }
}

fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k = [
        (-1.0f64 / (2.0 * sigma * sigma)).exp(),
        1.0,
        (-1.0f64 / (2.0 * sigma * sigma)).exp(),
    ];
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut tmp = Array3::zeros((c, h, w));
    // Separable 3-tap blur with edge clamping.
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (di, kv) in k.iter().enumerate() {
                    let xx = (x as isize + di as isize - 1).clamp(0, w as isize - 1) as usize;
                    acc += img[[ci, y, xx]] * kv;
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (di, kv) in k.iter().enumerate() {
                    let yy = (y as isize + di as isize - 1).clamp(0, h as isize - 1) as usize;
                    acc += tmp[[ci, yy, x]] * kv;
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

fn solarize(img: &mut Array3<f64>) {
    img.mapv_inplace(|x| if x > SOLARIZE_THRESHOLD { 1.0 - x } else { x });
}

/// Apply one stochastic augmentation draw to a batch. Shape-preserving,
/// output stays in `[0,1]`, bit-deterministic under a fixed stream.
pub fn augment_view(
    images: &Array4<f64>,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>> {
    policy.validate()?;
    if policy.is_identity() {
        return Ok(images.clone());
    }
    let b = images.shape()[0];
    let is_rgb = images.shape()[1] == 3;
    // One solarize probability per view draw.
    let sol_p = if policy.solarize_prob.1 > 0.0 {
        rng.random_range(policy.solarize_prob.0..=policy.solarize_prob.1)
    } else {
        0.0
    };
    let mut out = images.clone();
    for i in 0..b {
        let mut img = images.index_axis(Axis(0), i).to_owned();
        if policy.crop_scale != (1.0, 1.0) {
            img = random_resized_crop(&img, policy.crop_scale, rng);
        }
        if policy.hflip_prob > 0.0 && rng.random_range(0.0..1.0) < policy.hflip_prob {
            img = hflip(&img);
        }
        if is_rgb && policy.color_jitter_prob > 0.0
            && rng.random_range(0.0..1.0) < policy.color_jitter_prob
        {
            color_jitter(&mut img, rng);
        }
        if is_rgb && policy.grayscale_prob > 0.0
            && rng.random_range(0.0..1.0) < policy.grayscale_prob
        {
            grayscale(&mut img);
        }
        if policy.gaussian_blur_prob > 0.0
            && rng.random_range(0.0..1.0) < policy.gaussian_blur_prob
        {
            let sigma = rng.random_range(0.1..2.0);
            img = gaussian_blur(&img, sigma);
        }
        if sol_p > 0.0 && rng.random_range(0.0..1.0) < sol_p {
            solarize(&mut img);
        }
        img.mapv_inplace(clamp01);
        out.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(out)
}

/// The two augmented views of an episode's support and query batches.
#[derive(Clone, Debug)]
pub struct MultiViewBatch {
    pub t1_support: Array4<f64>,
    pub t2_support: Array4<f64>,
    pub t1_query: Array4<f64>,
    pub t2_query: Array4<f64>,
}

/// Build both views with independent draws per (set, view), each stream
/// derived from `(seed, view index, set index)`.
pub fn make_multiview(
    episode: &EpisodeTask,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<MultiViewBatch> {
    let mut draw = |view: u64, set: u64, images: &Array4<f64>| {
        let mut rng = seeding::rng(seed, &[seeding::stage::AUGMENT, view, set]);
        augment_view(images, policy, &mut rng)
    };
    Ok(MultiViewBatch {
        t1_support: draw(1, 0, &episode.support_images)?,
        t2_support: draw(2, 0, &episode.support_images)?,
        t1_query: draw(1, 1, &episode.query_images)?,
        t2_query: draw(2, 1, &episode.query_images)?,
    })
}
