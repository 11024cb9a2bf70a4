//! Meta-test protocol and robust evaluation: per task, adapt on the clean
//! support with the training inner rule, then score the query set clean and
//! under the configured attack; aggregate with a normal-approximation 95%
//! confidence interval over per-task accuracies.

use crate::attacks::{pgd_classwise, AttackConfig};
use crate::data::{augment_view, sample_episode, AugmentationPolicy, DatasetIndex, EpisodeTask};
use crate::error::{Error, Result};
use crate::model::{forward_logits_arrays, ArchConfig};
use crate::objective::TrainConfig;
use crate::params::{MetaParams, ParamSet};
use crate::seeding::{self, stage};
use ndarray::{Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_shot: usize,
    pub attack: AttackConfig,
    /// Adapt on augmented support instead of raw (off by default; the
    /// meta-test protocol adapts on raw support).
    pub adapt_on_augmented: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_tasks: 400,
            n_way: 5,
            k_shot: 5,
            q_shot: 15,
            attack: AttackConfig::eval_default(),
            adapt_on_augmented: false,
        }
    }
}

/// One evaluation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub tasks_evaluated: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub ci95_clean_halfwidth: f64,
    pub ci95_robust_halfwidth: f64,
    pub attack: String,
    pub checkpoint_id: String,
}

fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Clean and robust query accuracy of an adapted model.
///
/// Robust accuracy is measured against the class-wise PGD attack; it is not
/// asserted to sit below the clean accuracy (stochastically it may not).
pub fn evaluate_robust(
    arch: &ArchConfig,
    theta_tau: &ParamSet,
    phi: &ParamSet,
    query: &Array4<f64>,
    labels: &[usize],
    atk: &AttackConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let clean_logits = forward_logits_arrays(arch, theta_tau, phi, query)?;
    let clean = accuracy(&clean_logits, labels);
    let robust = if atk.steps == 0 && atk.init == crate::attacks::InitPolicy::Zero {
        clean
    } else {
        let adv = pgd_classwise(arch, theta_tau, phi, query, labels, atk, seed)?;
        let adv_logits = forward_logits_arrays(arch, theta_tau, phi, &adv.adv_view1)?;
        accuracy(&adv_logits, labels)
    };
    Ok((clean, robust))
}

/// Adapt on the episode's support with the checkpoint's inner rule and
/// score its query set.
pub fn evaluate_episode(
    arch: &ArchConfig,
    meta: &MetaParams,
    train: &TrainConfig,
    episode: &EpisodeTask,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let support = if eval.adapt_on_augmented {
        let mut rng = seeding::rng(seed, &[stage::AUGMENT]);
        augment_view(
            &episode.support_images,
            &AugmentationPolicy::training_default(),
            &mut rng,
        )?
    } else {
        episode.support_images.clone()
    };
    let adapt_phi = train.objective.adapts_phi();
    let (theta_tau, phi_tau) = crate::objective::inner_adapt(
        arch,
        meta,
        adapt_phi,
        &support,
        &episode.support_labels,
        train.inner_steps,
    )?;
    evaluate_robust(
        arch,
        &theta_tau,
        &phi_tau,
        &episode.query_images,
        &episode.query_labels,
        &eval.attack,
        seed,
    )
}

fn ci95_halfwidth(per_task: &[f64]) -> f64 {
    let n = per_task.len();
    if n < 2 {
        return 0.0;
    }
    let mean = per_task.iter().sum::<f64>() / n as f64;
    let var = per_task.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    1.96 * (var / n as f64).sqrt()
}

/// The meta-test protocol: `n_tasks` episodes sampled from the index, each
/// adapted and scored independently; returns aggregate means and 95% CIs.
pub fn meta_test(
    arch: &ArchConfig,
    meta: &MetaParams,
    train: &TrainConfig,
    data: &DatasetIndex,
    eval: &EvalConfig,
    seed: u64,
    checkpoint_id: &str,
) -> Result<MetricsRecord> {
    if arch.n_way != eval.n_way {
        return Err(Error::ShapeMismatch {
            expected: format!("checkpoint n_way {}", arch.n_way),
            got: format!("eval n_way {}", eval.n_way),
        });
    }
    if eval.n_tasks < 1 {
        return Err(Error::Config("n_tasks must be >= 1".into()));
    }
    let results: Result<Vec<(f64, f64)>> = (0..eval.n_tasks)
        .into_par_iter()
        .map(|task| {
            let task_seed = seeding::derive(seed, &[stage::EVAL, task as u64]);
            let mut rng = seeding::rng(task_seed, &[stage::EPISODE]);
            let episode = sample_episode(
                data,
                eval.n_way,
                eval.k_shot,
                eval.q_shot,
                &mut rng,
                task as u64,
            )?;
            evaluate_episode(arch, meta, train, &episode, eval, task_seed)
        })
        .collect();
    let results = results?;
    let clean: Vec<f64> = results.iter().map(|r| r.0).collect();
    let robust: Vec<f64> = results.iter().map(|r| r.1).collect();
    Ok(MetricsRecord {
        tasks_evaluated: eval.n_tasks,
        clean_accuracy: clean.iter().sum::<f64>() / clean.len() as f64,
        robust_accuracy: robust.iter().sum::<f64>() / robust.len() as f64,
        ci95_clean_halfwidth: ci95_halfwidth(&clean),
        ci95_robust_halfwidth: ci95_halfwidth(&robust),
        attack: eval.attack.descriptor("pgd"),
        checkpoint_id: checkpoint_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_fixture, load_dataset, FixtureSpec, Split};
    use crate::model::init_params;

    fn fixture() -> (tempfile::TempDir, DatasetIndex) {
        let tmp = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            images_per_class: 24,
            ..FixtureSpec::default()
        };
        let manifest = generate_fixture(tmp.path(), &spec, 3).unwrap();
        let idx = load_dataset(
            tmp.path(),
            &manifest,
            Split::MetaTest,
            (3, 16, 16),
            20,
            "fixture",
        )
        .unwrap();
        (tmp, idx)
    }

    #[test]
    fn zero_step_attack_means_robust_equals_clean() {
        let arch = ArchConfig::conv4_toy(3);
        let meta = init_params(&arch, 0.005, false, 1).unwrap();
        let (_tmp, idx) = fixture();
        let eval = EvalConfig {
            n_tasks: 3,
            n_way: 3,
            k_shot: 2,
            q_shot: 3,
            attack: AttackConfig {
                steps: 0,
                ..AttackConfig::eval_default()
            },
            adapt_on_augmented: false,
        };
        let arch3 = ArchConfig {
            n_way: 3,
            ..arch
        };
        let rec = meta_test(
            &arch3,
            &meta,
            &TrainConfig::default(),
            &idx,
            &eval,
            7,
            "test",
        )
        .unwrap();
        assert_eq!(rec.clean_accuracy, rec.robust_accuracy);
        assert_eq!(rec.tasks_evaluated, 3);
    }

    #[test]
    fn perfect_oracle_stub_scores_one() {
        // A classifier whose logits directly one-hot the label row: clean
        // accuracy must be exactly 1. Build by rigging a linear-toy model
        // whose features are the pixels and phi picks a pixel that encodes
        // the label. Instead of images, feed constructed batches.
        let arch = ArchConfig::linear_toy(3, 3, 3);
        let mut theta = ParamSet::new();
        theta.insert("lin.w", ndarray::Array2::eye(3).into_dyn());
        theta.insert("lin.b", ndarray::arr1(&[0.0; 3]).into_dyn());
        let mut phi = ParamSet::new();
        phi.insert("fc.w", ndarray::Array2::eye(3).into_dyn());
        phi.insert("fc.b", ndarray::arr1(&[0.0; 3]).into_dyn());
        // One-hot "images": instance i of class y has pixel y lit.
        let labels = vec![0usize, 1, 2, 1];
        let mut imgs = Array4::zeros((4, 3, 1, 1));
        for (i, &y) in labels.iter().enumerate() {
            imgs[[i, y, 0, 0]] = 1.0;
        }
        let (clean, robust) = evaluate_robust(
            &arch,
            &theta,
            &phi,
            &imgs,
            &labels,
            &AttackConfig {
                steps: 0,
                ..AttackConfig::eval_default()
            },
            3,
        )
        .unwrap();
        assert_eq!(clean, 1.0);
        assert_eq!(robust, 1.0);
    }

    #[test]
    fn random_model_sits_near_chance_with_ci() {
        // Untrained random weights on 4-way tasks: clean accuracy should be
        // statistically consistent with chance = 0.25 over a few dozen
        // tasks.
        let arch = ArchConfig {
            n_way: 4,
            ..ArchConfig::conv4_toy(4)
        };
        let meta = init_params(&arch, 0.0005, false, 99).unwrap();
        let (_tmp, idx) = fixture();
        let eval = EvalConfig {
            n_tasks: 40,
            n_way: 4,
            k_shot: 2,
            q_shot: 5,
            attack: AttackConfig {
                steps: 0,
                ..AttackConfig::eval_default()
            },
            adapt_on_augmented: false,
        };
        let mut meta_frozen = meta.clone();
        meta_frozen.alpha_theta = meta_frozen.alpha_theta.like_filled(0.0);
        let rec = meta_test(
            &arch,
            &meta_frozen,
            &TrainConfig::default(),
            &idx,
            &eval,
            11,
            "test",
        )
        .unwrap();
        // Binomial-style expectation: mean within 4 CI halfwidths of chance
        // (wide on purpose; this is a sanity bound, not a sharp test).
        let chance = 0.25;
        assert!(
            (rec.clean_accuracy - chance).abs() <= 4.0 * rec.ci95_clean_halfwidth.max(0.02),
            "clean {} vs chance {chance} (ci {})",
            rec.clean_accuracy,
            rec.ci95_clean_halfwidth
        );
    }

    #[test]
    fn single_task_ci_degenerates_to_zero() {
        let arch = ArchConfig {
            n_way: 2,
            ..ArchConfig::conv4_toy(2)
        };
        let meta = init_params(&arch, 0.005, false, 1).unwrap();
        let (_tmp, idx) = fixture();
        let eval = EvalConfig {
            n_tasks: 1,
            n_way: 2,
            k_shot: 2,
            q_shot: 2,
            attack: AttackConfig {
                steps: 0,
                ..AttackConfig::eval_default()
            },
            adapt_on_augmented: false,
        };
        let rec = meta_test(
            &arch,
            &meta,
            &TrainConfig::default(),
            &idx,
            &eval,
            5,
            "test",
        )
        .unwrap();
        assert_eq!(rec.ci95_clean_halfwidth, 0.0);
    }

    #[test]
    fn meta_test_is_deterministic_in_seed() {
        let arch = ArchConfig {
            n_way: 2,
            ..ArchConfig::conv4_toy(2)
        };
        let meta = init_params(&arch, 0.005, false, 1).unwrap();
        let (_tmp, idx) = fixture();
        let eval = EvalConfig {
            n_tasks: 4,
            n_way: 2,
            k_shot: 2,
            q_shot: 3,
            attack: AttackConfig {
                steps: 2,
                ..AttackConfig::eval_default()
            },
            adapt_on_augmented: false,
        };
        let cfg = TrainConfig::default();
        let a = meta_test(&arch, &meta, &cfg, &idx, &eval, 5, "t").unwrap();
        let b = meta_test(&arch, &meta, &cfg, &idx, &eval, 5, "t").unwrap();
        assert_eq!(a.clean_accuracy, b.clean_accuracy);
        assert_eq!(a.robust_accuracy, b.robust_accuracy);
        let c = meta_test(&arch, &meta, &cfg, &idx, &eval, 6, "t").unwrap();
        assert!(c.clean_accuracy != a.clean_accuracy || c.robust_accuracy != a.robust_accuracy);
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let arch = ArchConfig::conv4_toy(5);
        let meta = init_params(&arch, 0.005, false, 1).unwrap();
        let (_tmp, idx) = fixture();
        let eval = EvalConfig {
            n_way: 3,
            ..EvalConfig::default()
        };
        assert!(matches!(
            meta_test(&arch, &meta, &TrainConfig::default(), &idx, &eval, 5, "t"),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
