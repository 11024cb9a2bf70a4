//! Self-contained synthetic shape dataset so every test and smoke run works
//! without downloads.
//!
//! Eight shape archetypes are drawn procedurally at 16x16. Each split gets
//! all eight shapes under a split-specific palette, so class identity within
//! a split is carried by shape (the palette is shared by all of a split's
//! classes) and splits stay class-disjoint. Per-image randomness: position,
//! size, foreground color jitter, and background noise.

use crate::error::{Error, Result};
use crate::seeding::{self, stage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "cross", "ring", "diamond", "hbars", "vbars",
];
/// (name, base RGB) per split.
const PALETTES: [(&str, [f64; 3]); 3] = [
    ("a", [0.85, 0.30, 0.25]),
    ("b", [0.25, 0.75, 0.35]),
    ("c", [0.30, 0.40, 0.85]),
];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub side: usize,
    pub images_per_class: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            side: 16,
            images_per_class: 40,
        }
    }
}

/// What the generator wrote, for tests that compare loader output against
/// the generator's own accounting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub spec: FixtureSpec,
    pub seed: u64,
    /// (split section, class names)
    pub splits: Vec<(String, Vec<String>)>,
    pub images_per_class: usize,
}

fn shape_mask(shape: &str, side: usize, cx: f64, cy: f64, r: f64) -> Vec<Vec<f64>> {
    let mut mask = vec![vec![0.0; side]; side];
    for (y, row) in mask.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match shape {
                "circle" => (dx * dx + dy * dy).sqrt() <= r,
                "square" => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                "triangle" => {
                    // Upward triangle: below apex, within flaring sides.
                    dy >= -r && dy <= r * 0.8 && dx.abs() <= (dy + r) * 0.6
                }
                "cross" => {
                    (dx.abs() <= r * 0.35 && dy.abs() <= r)
                        || (dy.abs() <= r * 0.35 && dx.abs() <= r)
                }
                "ring" => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= r && d >= r * 0.55
                }
                "diamond" => dx.abs() + dy.abs() <= r,
                "hbars" => dy.abs() <= r && dx.abs() <= r && (y / 2) % 2 == 0,
                "vbars" => dy.abs() <= r && dx.abs() <= r && (x / 2) % 2 == 0,
                _ => unreachable!("unknown shape {shape}"),
            };
            if inside {
                *cell = 1.0;
            }
        }
    }
    mask
}

fn render(
    shape: &str,
    base: [f64; 3],
    spec: &FixtureSpec,
    rng: &mut ChaCha8Rng,
) -> image::RgbImage {
    let side = spec.side;
    let cx = side as f64 / 2.0 + rng.random_range(-2.0..=2.0);
    let cy = side as f64 / 2.0 + rng.random_range(-2.0..=2.0);
    let r = rng.random_range(side as f64 * 0.22..=side as f64 * 0.36);
    let mask = shape_mask(shape, side, cx, cy, r);
    // Foreground jitter keeps color informative but not sufficient.
    let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-0.12..=0.12)).collect();
    let bg: f64 = rng.random_range(0.05..=0.20);
    image::RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let m = mask[y as usize][x as usize];
        let noise: f64 = {
            // Hash-free per-pixel noise from the stream would break
            // from_fn's row order stability, so derive from coordinates.
            let v = (x as f64 * 12.9898 + y as f64 * 78.233).sin() * 43758.5453;
            (v - v.floor() - 0.5) * 0.08
        };
        let mut px = [0u8; 3];
        for c in 0..3 {
            let fg = (base[c] + jitter[c]).clamp(0.0, 1.0);
            let val = (m * fg + (1.0 - m) * bg + noise).clamp(0.0, 1.0);
            px[c] = (val * 255.0).round() as u8;
        }
        image::Rgb(px)
    })
}

/// Generate the dataset under `out_dir`; returns the path of the split
/// manifest. Also writes `fixture_manifest.json` with the generator's own
/// class/count accounting.
pub fn generate_fixture(out_dir: &Path, spec: &FixtureSpec, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut manifest_text = String::new();
    let mut splits = Vec::new();
    for (split_idx, (section, (palette, base))) in ["meta-train", "meta-val", "meta-test"]
        .iter()
        .zip(PALETTES.iter())
        .enumerate()
    {
        manifest_text.push_str(&format!("[{section}]\n"));
        let mut class_names = Vec::new();
        for (shape_idx, shape) in SHAPES.iter().enumerate() {
            let class = format!("{shape}_{palette}");
            let cdir = out_dir.join(&class);
            fs::create_dir_all(&cdir)
                .map_err(|e| Error::io(format!("creating {}", cdir.display()), e))?;
            for i in 0..spec.images_per_class {
                let mut rng = seeding::rng(
                    seed,
                    &[stage::FIXTURE, split_idx as u64, shape_idx as u64, i as u64],
                );
                let img = render(shape, *base, spec, &mut rng);
                let path = cdir.join(format!("img{i:04}.png"));
                img.save(&path).map_err(|e| Error::ImageDecode {
                    path: path.clone(),
                    reason: format!("encoding failed: {e}"),
                })?;
            }
            manifest_text.push_str(&class);
            manifest_text.push('\n');
            class_names.push(class);
        }
        splits.push((section.to_string(), class_names));
    }
    let manifest_path = out_dir.join("splits.txt");
    fs::write(&manifest_path, manifest_text)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    let gen_manifest = FixtureManifest {
        spec: *spec,
        seed,
        splits,
        images_per_class: spec.images_per_class,
    };
    let json_path = out_dir.join("fixture_manifest.json");
    fs::write(&json_path, serde_json::to_string_pretty(&gen_manifest)?)
        .map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
    Ok(manifest_path)
}
