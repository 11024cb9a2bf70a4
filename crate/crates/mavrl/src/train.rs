//! The meta-training loop: sample a meta-batch of episodes, evaluate the
//! configured objective on each (in parallel), average gradients, and take
//! an SGD meta-update. Periodically validates on clean tasks, tracks the
//! best-validation checkpoint, and appends one JSON line of metrics per
//! outer step.
//!
//! Every stochastic stage derives its stream from `(run seed, step, slot)`,
//! so training is a pure function of the seed and resuming from a
//! checkpoint continues bit-identically in deterministic mode.

use crate::attacks::AttackConfig;
use crate::checkpoint::Checkpoint;
use crate::data::{sample_episode, AugmentationPolicy, DatasetIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate_episode, EvalConfig};
use crate::model::ArchConfig;
use crate::objective::{episode_objective, meta_update, MetaGrads, TrainConfig};
use crate::params::MetaParams;
use crate::seeding::{self, stage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One JSON-lines metrics entry per outer step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub objective: String,
    pub total: f64,
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
    pub consistency: Option<f64>,
    pub val_clean_accuracy: Option<f64>,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub final_params: MetaParams,
    pub best_val_accuracy: f64,
}

/// Episode shape used for training tasks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_shot: usize,
}

#[allow(clippy::too_many_arguments)]
pub struct TrainSetup<'a> {
    pub arch: &'a ArchConfig,
    pub train: &'a TrainConfig,
    pub attack: &'a AttackConfig,
    pub policy: &'a AugmentationPolicy,
    pub shape: EpisodeShape,
    pub data_train: &'a DatasetIndex,
    pub data_val: Option<&'a DatasetIndex>,
    pub seed: u64,
    pub out_dir: &'a Path,
    pub manifest_name: Option<String>,
}

fn clean_validation(
    setup: &TrainSetup,
    meta: &MetaParams,
    step: usize,
) -> Result<Option<f64>> {
    let Some(val) = setup.data_val else {
        return Ok(None);
    };
    let cfg = setup.train;
    if cfg.val_tasks == 0 {
        return Ok(None);
    }
    let eval = EvalConfig {
        n_tasks: cfg.val_tasks,
        n_way: setup.shape.n_way,
        k_shot: cfg.val_k_shot,
        q_shot: cfg.val_q_shot,
        // Validation runs on clean tasks only.
        attack: AttackConfig {
            steps: 0,
            ..AttackConfig::eval_default()
        },
        adapt_on_augmented: false,
    };
    let accs: Result<Vec<f64>> = (0..cfg.val_tasks)
        .into_par_iter()
        .map(|task| {
            let task_seed =
                seeding::derive(setup.seed, &[stage::EVAL, step as u64, task as u64]);
            let mut rng = seeding::rng(task_seed, &[stage::EPISODE]);
            let episode = sample_episode(
                val,
                eval.n_way,
                eval.k_shot,
                eval.q_shot,
                &mut rng,
                task as u64,
            )?;
            let (clean, _) =
                evaluate_episode(setup.arch, meta, cfg, &episode, &eval, task_seed)?;
            Ok(clean)
        })
        .collect();
    let accs = accs?;
    Ok(Some(accs.iter().sum::<f64>() / accs.len() as f64))
}

/// Run (or resume) meta-training. Returns paths to the last and
/// best-validation checkpoints and the metrics log.
pub fn meta_train(setup: &TrainSetup, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let cfg = setup.train;
    cfg.validate()?;
    setup.attack.validate()?;
    setup.policy.validate()?;
    fs::create_dir_all(setup.out_dir)
        .map_err(|e| Error::io(format!("creating {}", setup.out_dir.display()), e))?;

    let (mut meta, start_step) = match resume {
        Some(ck) => {
            if ck.arch != *setup.arch {
                return Err(Error::Checkpoint {
                    path: setup.out_dir.join("resume"),
                    reason: "architecture does not match checkpoint".into(),
                });
            }
            (ck.params, ck.global_step)
        }
        None => (
            crate::model::init_params(
                setup.arch,
                cfg.inner_lr0,
                cfg.objective.adapts_phi(),
                setup.seed,
            )?,
            0,
        ),
    };

    let metrics_path = setup.out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(format!("opening {}", metrics_path.display()), e))?;

    let last_path = setup.out_dir.join("last.ckpt.json");
    let best_path = setup.out_dir.join("best.ckpt.json");
    let save = |params: &MetaParams, step: usize, path: &Path| -> Result<()> {
        Checkpoint {
            version: crate::checkpoint::CHECKPOINT_VERSION,
            arch: setup.arch.clone(),
            train: cfg.clone(),
            params: params.clone(),
            global_step: step,
            seed: setup.seed,
            manifest: setup.manifest_name.clone(),
        }
        .save(path)
    };

    let mut best_val = f64::NEG_INFINITY;
    // A zero-step run emits the initial parameters unchanged.
    if start_step >= cfg.steps {
        save(&meta, start_step, &last_path)?;
        save(&meta, start_step, &best_path)?;
        return Ok(TrainOutcome {
            last_checkpoint: last_path,
            best_checkpoint: best_path,
            metrics_path,
            final_params: meta,
            best_val_accuracy: best_val,
        });
    }

    for step in start_step..cfg.steps {
        let t0 = Instant::now();
        let outputs: Result<Vec<_>> = (0..cfg.meta_batch)
            .into_par_iter()
            .map(|slot| {
                let ep_seed =
                    seeding::derive(setup.seed, &[stage::EPISODE, step as u64, slot as u64]);
                let mut rng = seeding::rng(ep_seed, &[stage::EPISODE]);
                let episode = sample_episode(
                    setup.data_train,
                    setup.shape.n_way,
                    setup.shape.k_shot,
                    setup.shape.q_shot,
                    &mut rng,
                    ep_seed,
                )?;
                episode_objective(
                    setup.arch,
                    &meta,
                    &episode,
                    setup.policy,
                    setup.attack,
                    cfg,
                    ep_seed,
                )
            })
            .collect();
        let outputs = outputs?;

        // Serial accumulation in slot order keeps runs bit-reproducible.
        let mut grads = MetaGrads::zeros_like(&meta);
        let scale = 1.0 / cfg.meta_batch as f64;
        let mut total = 0.0;
        let mut ce_acc: Vec<f64> = Vec::new();
        let mut kl_acc: Vec<f64> = Vec::new();
        let mut cos_acc: Option<f64> = None;
        for out in &outputs {
            out.breakdown.validate()?;
            grads.add_scaled(&out.grads, scale);
            total += out.total * scale;
            if ce_acc.is_empty() {
                ce_acc = vec![0.0; out.breakdown.ce.len()];
                kl_acc = vec![0.0; out.breakdown.kl.len()];
            }
            for (a, v) in ce_acc.iter_mut().zip(&out.breakdown.ce) {
                *a += v * scale;
            }
            for (a, v) in kl_acc.iter_mut().zip(&out.breakdown.kl) {
                *a += v * scale;
            }
            if let Some(c) = out.breakdown.consistency {
                *cos_acc.get_or_insert(0.0) += c * scale;
            }
        }
        meta = meta_update(&meta, &grads, cfg)?;

        let next = step + 1;
        let mut val_acc = None;
        if next % cfg.val_every == 0 || next == cfg.steps {
            val_acc = clean_validation(setup, &meta, next)?;
            if let Some(acc) = val_acc {
                if acc > best_val {
                    best_val = acc;
                    save(&meta, next, &best_path)?;
                }
            }
            save(&meta, next, &last_path)?;
        }

        let entry = StepMetrics {
            step: next,
            objective: cfg.objective.name().to_string(),
            total,
            ce: ce_acc,
            kl: kl_acc,
            consistency: cos_acc,
            val_clean_accuracy: val_acc,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        serde_json::to_writer(&mut metrics_file, &entry)?;
        metrics_file
            .write_all(b"\n")
            .map_err(|e| Error::io("writing metrics".to_string(), e))?;
    }

    save(&meta, cfg.steps, &last_path)?;
    if best_val == f64::NEG_INFINITY {
        // No validation ran; mirror the last checkpoint.
        save(&meta, cfg.steps, &best_path)?;
    }
    Ok(TrainOutcome {
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        metrics_path,
        final_params: meta,
        best_val_accuracy: best_val,
    })
}

/// Parse a metrics log back into entries.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_fixture, load_dataset, FixtureSpec, Split};
    use crate::objective::{GradientMode, Objective};

    struct Fixture {
        _tmp: tempfile::TempDir,
        train: DatasetIndex,
        val: DatasetIndex,
    }

    fn fixture() -> Fixture {
        let tmp = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            images_per_class: 12,
            ..FixtureSpec::default()
        };
        let manifest = generate_fixture(tmp.path(), &spec, 3).unwrap();
        let train = load_dataset(tmp.path(), &manifest, Split::MetaTrain, (3, 16, 16), 8, "fx")
            .unwrap();
        let val =
            load_dataset(tmp.path(), &manifest, Split::MetaVal, (3, 16, 16), 8, "fx").unwrap();
        Fixture {
            _tmp: tmp,
            train,
            val,
        }
    }

    fn small_cfg(objective: Objective, steps: usize) -> TrainConfig {
        TrainConfig {
            objective,
            lambda: 6.0,
            inner_lr0: 0.01,
            outer_lr: 0.01,
            weight_decay: 1e-4,
            meta_batch: 2,
            inner_steps: 1,
            gradient_mode: GradientMode::FirstOrder,
            steps,
            val_every: 2,
            val_tasks: 2,
            val_k_shot: 1,
            val_q_shot: 2,
        }
    }

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            widths: vec![4, 4],
            feature_dim: 8,
            groups: 2,
            ..ArchConfig::conv4_toy(2)
        }
    }

    #[test]
    fn zero_steps_emits_initial_checkpoint() {
        let fx = fixture();
        let out = tempfile::tempdir().unwrap();
        let arch = toy_arch();
        let cfg = small_cfg(Objective::CleanMaml, 0);
        let atk = AttackConfig {
            steps: 0,
            ..AttackConfig::train_default()
        };
        let setup = TrainSetup {
            arch: &arch,
            train: &cfg,
            attack: &atk,
            policy: &AugmentationPolicy::identity(),
            shape: EpisodeShape {
                n_way: 2,
                k_shot: 2,
                q_shot: 2,
            },
            data_train: &fx.train,
            data_val: Some(&fx.val),
            seed: 5,
            out_dir: out.path(),
            manifest_name: None,
        };
        let outcome = meta_train(&setup, None).unwrap();
        let ck = Checkpoint::load(&outcome.last_checkpoint).unwrap();
        let init = crate::model::init_params(&arch, cfg.inner_lr0, true, 5).unwrap();
        assert_eq!(ck.params, init);
        assert_eq!(ck.global_step, 0);
    }

    #[test]
    fn short_run_is_reproducible_and_resumable() {
        let fx = fixture();
        let arch = toy_arch();
        let cfg = small_cfg(Objective::Mavrl, 4);
        let atk = AttackConfig {
            steps: 1,
            ..AttackConfig::train_default()
        };
        let shape = EpisodeShape {
            n_way: 2,
            k_shot: 2,
            q_shot: 3,
        };
        let run = |dir: &Path, cfg: &TrainConfig, resume: Option<Checkpoint>| {
            let setup = TrainSetup {
                arch: &arch,
                train: cfg,
                attack: &atk,
                policy: &AugmentationPolicy::training_default(),
                shape,
                data_train: &fx.train,
                data_val: Some(&fx.val),
                seed: 9,
                out_dir: dir,
                manifest_name: None,
            };
            meta_train(&setup, resume).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run(d1.path(), &cfg, None);
        let b = run(d2.path(), &cfg, None);
        assert_eq!(a.final_params, b.final_params);
        let ma = read_metrics(&a.metrics_path).unwrap();
        let mb = read_metrics(&b.metrics_path).unwrap();
        assert_eq!(ma.len(), mb.len());
        for (x, y) in ma.iter().zip(mb.iter()) {
            assert!((x.total - y.total).abs() < 1e-12);
        }

        // Resume: 2 steps, then continue to 4 — must equal the one-shot run.
        let d3 = tempfile::tempdir().unwrap();
        let cfg2 = TrainConfig { steps: 2, ..cfg.clone() };
        let first = run(d3.path(), &cfg2, None);
        let ck = Checkpoint::load(&first.last_checkpoint).unwrap();
        let cfg4 = TrainConfig { steps: 4, ..cfg.clone() };
        let resumed = run(d3.path(), &cfg4, Some(ck));
        assert_eq!(resumed.final_params, a.final_params);
    }

    #[test]
    fn metrics_log_has_one_entry_per_step() {
        let fx = fixture();
        let out = tempfile::tempdir().unwrap();
        let arch = toy_arch();
        let cfg = small_cfg(Objective::Aq, 3);
        let atk = AttackConfig {
            steps: 1,
            ..AttackConfig::train_default()
        };
        let setup = TrainSetup {
            arch: &arch,
            train: &cfg,
            attack: &atk,
            policy: &AugmentationPolicy::identity(),
            shape: EpisodeShape {
                n_way: 2,
                k_shot: 2,
                q_shot: 2,
            },
            data_train: &fx.train,
            data_val: None,
            seed: 2,
            out_dir: out.path(),
            manifest_name: None,
        };
        let outcome = meta_train(&setup, None).unwrap();
        let metrics = read_metrics(&outcome.metrics_path).unwrap();
        assert_eq!(metrics.len(), 3);
        assert!(metrics.iter().all(|m| m.objective == "aq"));
        assert!(metrics.iter().all(|m| m.total.is_finite()));
    }
}
