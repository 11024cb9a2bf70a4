//! Directory-per-class dataset layout with a plain-text split manifest.
//!
//! Manifest format: section headers `[meta-train]`, `[meta-val]`,
//! `[meta-test]`, one class name per line, `#` comments allowed. Images are
//! PNG files decoded to `[0,1]` float pixels and held in memory (datasets at
//! this scale are a few megabytes).

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "meta-train")]
    MetaTrain,
    #[serde(rename = "meta-val")]
    MetaVal,
    #[serde(rename = "meta-test")]
    MetaTest,
}

impl Split {
    pub fn section(&self) -> &'static str {
        match self {
            Split::MetaTrain => "meta-train",
            Split::MetaVal => "meta-val",
            Split::MetaTest => "meta-test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.section())
    }
}

#[derive(Clone, Debug)]
pub struct ClassRecord {
    pub name: String,
    /// Decoded images, `[C, H, W]` in `[0,1]`, in sorted filename order.
    pub images: Vec<Array3<f64>>,
    pub files: Vec<PathBuf>,
}

/// One split of a dataset: the classes named by the manifest section, fully
/// decoded and validated.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub classes: Vec<ClassRecord>,
    /// (channels, height, width)
    pub image_shape: (usize, usize, usize),
    pub domain_tag: String,
}

impl DatasetIndex {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).min().unwrap_or(0)
    }
}

/// Parse the manifest and return the class names listed under `split`.
pub fn parse_manifest(manifest: &Path, split: Split) -> Result<Vec<String>> {
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::io(format!("reading manifest {}", manifest.display()), e))?;
    let mut current: Option<Split> = None;
    let mut classes = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(section) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = match section {
                "meta-train" => Some(Split::MetaTrain),
                "meta-val" => Some(Split::MetaVal),
                "meta-test" => Some(Split::MetaTest),
                other => {
                    return Err(Error::Config(format!(
                        "unknown manifest section '[{other}]' in {}",
                        manifest.display()
                    )))
                }
            };
            continue;
        }
        if current == Some(split) {
            classes.push(line.to_string());
        }
    }
    if classes.is_empty() {
        return Err(Error::EmptySplit {
            split: split.section().to_string(),
            path: manifest.to_path_buf(),
        });
    }
    Ok(classes)
}

fn decode_png(path: &Path, expected: (usize, usize, usize)) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (ec, eh, ew) = expected;
    let got = (3usize, h as usize, w as usize);
    if got != expected {
        return Err(Error::ImageShape {
            path: path.to_path_buf(),
            got,
            expected,
        });
    }
    let mut arr = Array3::zeros((ec, eh, ew));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            arr[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(arr)
}

/// Load one split: exactly the manifest's classes, images validated against
/// `image_shape`, every class holding at least `min_images` images.
pub fn load_dataset(
    root: &Path,
    manifest: &Path,
    split: Split,
    image_shape: (usize, usize, usize),
    min_images: usize,
    domain_tag: &str,
) -> Result<DatasetIndex> {
    let class_names = parse_manifest(manifest, split)?;
    let mut classes = Vec::with_capacity(class_names.len());
    for name in class_names {
        let dir = root.join(&name);
        if !dir.is_dir() {
            return Err(Error::MissingClassDir {
                class: name,
                root: root.to_path_buf(),
            });
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        if files.len() < min_images {
            return Err(Error::ClassTooSmall {
                class: name,
                available: files.len(),
                required: min_images,
            });
        }
        let mut images = Vec::with_capacity(files.len());
        for f in &files {
            images.push(decode_png(f, image_shape)?);
        }
        classes.push(ClassRecord {
            name,
            images,
            files,
        });
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        classes,
        image_shape,
        domain_tag: domain_tag.to_string(),
    })
}
