//! Run configuration: a TOML file with documented defaults for every field,
//! dotted-key `--set` overrides, hard errors on unknown keys, and a run
//! manifest written before training for provenance.

use crate::attacks::AttackConfig;
use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, EncoderFamily, NormPolicy};
use crate::objective::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: PathBuf,
    /// Split manifest path; defaults to `<root>/splits.txt`.
    pub manifest: Option<PathBuf>,
    pub domain_tag: String,
    /// (channels, height, width)
    pub image_shape: (usize, usize, usize),
    pub n_way: usize,
    pub k_shot: usize,
    pub q_shot: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("fixtures/shapes"),
            manifest: None,
            domain_tag: "fixture-shapes".into(),
            image_shape: (3, 16, 16),
            n_way: 5,
            k_shot: 5,
            q_shot: 15,
        }
    }
}

impl DataSection {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.root.join("splits.txt"))
    }
}

/// Architecture section: like [`ArchConfig`] but without `n_way`, which is
/// pinned by the episode shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub family: EncoderFamily,
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub in_channels: usize,
    pub norm: NormPolicy,
    pub groups: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            family: EncoderFamily::Conv4Toy,
            widths: vec![8, 8, 8, 8],
            feature_dim: 16,
            in_channels: 3,
            norm: NormPolicy::Group,
            groups: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub train: AttackConfig,
    pub eval: AttackConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            train: AttackConfig::train_default(),
            eval: AttackConfig::eval_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_tasks: usize,
    pub adapt_on_augmented: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_tasks: 400,
            adapt_on_augmented: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub arch: ArchSection,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub augment: AugmentationPolicy,
    pub eval: EvalSection,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy::training_default()
    }
}

impl RunConfig {
    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            family: self.arch.family,
            widths: self.arch.widths.clone(),
            feature_dim: self.arch.feature_dim,
            n_way: self.data.n_way,
            in_channels: self.arch.in_channels,
            norm: self.arch.norm,
            groups: self.arch.groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch_config().validate()?;
        self.train.validate()?;
        self.attack.train.validate()?;
        self.attack.eval.validate()?;
        self.augment.validate()?;
        if self.eval.n_tasks < 1 {
            return Err(Error::Config("eval.n_tasks must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse a config file and apply `key=value` overrides (dotted keys).
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut value = toml::Value::Table(table);
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }
}

/// Apply one `a.b.c=value` override onto a TOML tree. Values parse as TOML
/// (so numbers, booleans and arrays work); anything unparsable is a string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' must be key=value")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t.get("v").cloned().unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Written before training starts; immutable afterwards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub code_version: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn build(config: &RunConfig) -> Result<RunManifest> {
        let dataset_hash = if config.data.root.is_dir() {
            crate::checkpoint::dir_hash(&config.data.root)?
        } else {
            "unavailable".to_string()
        };
        Ok(RunManifest {
            config: config.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_hash,
            seed: config.seed,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// Write under `out_dir/manifest.json`. A manifest from an earlier run
    /// of the same config is left untouched (resume); a conflicting one is
    /// an error.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir)
            .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
        let path = out_dir.join("manifest.json");
        if path.exists() {
            let existing: RunManifest =
                serde_json::from_str(&fs::read_to_string(&path).map_err(|e| {
                    Error::io(format!("reading {}", path.display()), e)
                })?)?;
            if existing.config != self.config || existing.dataset_hash != self.dataset_hash {
                return Err(Error::Config(format!(
                    "manifest {} exists with a different config; refusing to overwrite",
                    path.display()
                )));
            }
            return Ok(path);
        }
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg.data.n_way, 5);
        assert_eq!(cfg.eval.n_tasks, 400);
        assert_eq!(cfg.attack.eval.steps, 20);
        let eps = 8.0 / 255.0;
        assert!((cfg.attack.train.epsilon - eps).abs() < 1e-12);
        assert!((cfg.attack.eval.gamma - 8.0 / 2550.0).abs() < 1e-12);
        assert!((cfg.train.lambda - 6.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::parse("[train]\nbogus_key = 3\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err2 = RunConfig::parse("top_level_bogus = 1\n", &[]).unwrap_err();
        assert!(matches!(err2, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_with_dotted_keys() {
        let cfg = RunConfig::parse(
            "",
            &[
                "train.objective=\"aq\"".to_string(),
                "train.lambda=3.5".to_string(),
                "attack.train.steps=7".to_string(),
                "seed=99".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.objective, crate::objective::Objective::Aq);
        assert_eq!(cfg.train.lambda, 3.5);
        assert_eq!(cfg.attack.train.steps, 7);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn bad_override_value_is_an_error() {
        let err = RunConfig::parse("", &["train.lambda=notanumber".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err2 = RunConfig::parse("", &["no_equals_sign".to_string()]).unwrap_err();
        assert!(matches!(err2, Error::Config(_)));
    }

    #[test]
    fn parse_serialize_parse_round_trips() {
        let cfg = RunConfig::parse(
            "",
            &["train.objective=\"ablation2\"".to_string(), "data.q_shot=7".to_string()],
        )
        .unwrap();
        let text = cfg.to_toml().unwrap();
        let cfg2 = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn manifest_write_is_idempotent_but_guards_conflicts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("", &[]).unwrap();
        let m = RunManifest::build(&cfg).unwrap();
        m.write(tmp.path()).unwrap();
        m.write(tmp.path()).unwrap(); // same content: fine
        let cfg2 = RunConfig::parse("", &["seed=1234".to_string()]).unwrap();
        let m2 = RunManifest::build(&cfg2).unwrap();
        assert!(m2.write(tmp.path()).is_err());
    }
}
