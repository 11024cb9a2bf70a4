//! Versioned checkpoint container: architecture, named parameter arrays,
//! optimizer-relevant config, and the RNG/step state needed to resume a run
//! with an identical continuation.

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::objective::TrainConfig;
use crate::params::MetaParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchConfig,
    /// Inner-adaptation settings travel with the parameters so evaluation
    /// mirrors training.
    pub train: TrainConfig,
    pub params: MetaParams,
    pub global_step: usize,
    /// Base seed of the run; per-step streams derive from (seed, step).
    pub seed: u64,
    /// Name of the run manifest that produced this artifact.
    pub manifest: Option<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "unsupported version {} (expected {CHECKPOINT_VERSION})",
                    ck.version
                ),
            });
        }
        Ok(ck)
    }
}

/// Content hash of a file, for provenance lines in reports.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("hashing {}", path.display()), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_of(&h.finalize()))
}

/// Hash a dataset directory: sorted relative paths and file contents.
pub fn dir_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in &files {
        h.update(rel.as_bytes());
        let bytes = fs::read(root.join(rel))
            .map_err(|e| Error::io(format!("hashing {}", root.join(rel).display()), e))?;
        h.update(&bytes);
    }
    Ok(hex_of(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in
        fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
    {
        let entry = entry.map_err(|e| Error::io("reading dir entry".to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    Ok(())
}

fn hex_of(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn toy_checkpoint() -> Checkpoint {
        let arch = ArchConfig::linear_toy(4, 3, 2);
        let params = init_params(&arch, 0.01, false, 5).unwrap();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch,
            train: TrainConfig::default(),
            params,
            global_step: 17,
            seed: 42,
            manifest: Some("manifest.json".into()),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let p1 = tmp.path().join("a.ckpt.json");
        let p2 = tmp.path().join("b.ckpt.json");
        let ck = toy_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(ck, loaded);
        loaded.save(&p2).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let b2 = fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("a.ckpt.json");
        let mut ck = toy_checkpoint();
        ck.version = 99;
        let json = serde_json::to_string(&ck).unwrap();
        fs::write(&p, json).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn dir_hash_is_stable_and_content_sensitive() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("c")).unwrap();
        fs::write(tmp.path().join("c/x.txt"), b"one").unwrap();
        let h1 = dir_hash(tmp.path()).unwrap();
        let h2 = dir_hash(tmp.path()).unwrap();
        assert_eq!(h1, h2);
        fs::write(tmp.path().join("c/x.txt"), b"two").unwrap();
        assert_ne!(h1, dir_hash(tmp.path()).unwrap());
    }
}
