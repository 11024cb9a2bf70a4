//! N-way K-shot episodic task sampling.

use crate::data::index::DatasetIndex;
use crate::error::{Error, Result};
use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One N-way K-shot task: support and query batches with labels remapped to
/// `0..N-1` and disjoint image records.
#[derive(Clone, Debug)]
pub struct EpisodeTask {
    pub support_images: Array4<f64>,
    pub support_labels: Vec<usize>,
    pub query_images: Array4<f64>,
    pub query_labels: Vec<usize>,
    /// Original class name per episode label.
    pub class_map: Vec<String>,
    pub episode_id: u64,
}

impl EpisodeTask {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }
}

/// Sample an episode: `n_way` distinct classes, `k_shot` support and
/// `q_shot` query images per class, all draws from `rng`.
pub fn sample_episode(
    index: &DatasetIndex,
    n_way: usize,
    k_shot: usize,
    q_shot: usize,
    rng: &mut ChaCha8Rng,
    episode_id: u64,
) -> Result<EpisodeTask> {
    if n_way > index.n_classes() {
        return Err(Error::NotEnoughClasses {
            requested: n_way,
            available: index.n_classes(),
        });
    }
    let per_class = k_shot + q_shot;
    let (c, h, w) = index.image_shape;

    let mut class_ids: Vec<usize> = (0..index.n_classes()).collect();
    class_ids.shuffle(rng);
    class_ids.truncate(n_way);

    let mut support_images = Array4::zeros((n_way * k_shot, c, h, w));
    let mut query_images = Array4::zeros((n_way * q_shot, c, h, w));
    let mut class_map = Vec::with_capacity(n_way);

    for (label, &cid) in class_ids.iter().enumerate() {
        let class = &index.classes[cid];
        if class.images.len() < per_class {
            return Err(Error::ClassTooSmall {
                class: class.name.clone(),
                available: class.images.len(),
                required: per_class,
            });
        }
        let mut img_ids: Vec<usize> = (0..class.images.len()).collect();
        img_ids.shuffle(rng);
        img_ids.truncate(per_class);
        for (j, &iid) in img_ids.iter().enumerate() {
            let img = &class.images[iid];
            if j < k_shot {
                let row = label * k_shot + j;
                support_images
                    .index_axis_mut(ndarray::Axis(0), row)
                    .assign(img);
            } else {
                let row = label * q_shot + (j - k_shot);
                query_images
                    .index_axis_mut(ndarray::Axis(0), row)
                    .assign(img);
            }
        }
        class_map.push(class.name.clone());
    }
    // Support block for episode label L sits at rows L*k..(L+1)*k, and the
    // query block likewise.
    let support_labels = (0..n_way)
        .flat_map(|l| std::iter::repeat_n(l, k_shot))
        .collect();
    let query_labels = (0..n_way)
        .flat_map(|l| std::iter::repeat_n(l, q_shot))
        .collect();

    Ok(EpisodeTask {
        support_images,
        support_labels,
        query_images,
        query_labels,
        class_map,
        episode_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture::{generate_fixture, FixtureSpec};
    use crate::data::index::{load_dataset, Split};
    use crate::seeding;

    fn fixture_index() -> DatasetIndex {
        let tmp = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            images_per_class: 24,
            ..FixtureSpec::default()
        };
        let manifest = generate_fixture(tmp.path(), &spec, 7).unwrap();
        load_dataset(
            tmp.path(),
            &manifest,
            Split::MetaTrain,
            (3, spec.side, spec.side),
            20,
            "fixture",
        )
        .unwrap()
    }

    #[test]
    fn five_way_five_shot_fifteen_query_sizes() {
        let idx = fixture_index();
        let mut rng = seeding::rng(1, &[seeding::stage::EPISODE]);
        let ep = sample_episode(&idx, 5, 5, 15, &mut rng, 0).unwrap();
        assert_eq!(ep.support_images.shape()[0], 25);
        assert_eq!(ep.query_images.shape()[0], 75);
        assert_eq!(ep.support_labels.len(), 25);
        assert_eq!(ep.query_labels.len(), 75);
    }

    #[test]
    fn one_way_one_shot_minimal_episode() {
        let idx = fixture_index();
        let mut rng = seeding::rng(2, &[seeding::stage::EPISODE]);
        let ep = sample_episode(&idx, 1, 1, 1, &mut rng, 0).unwrap();
        assert_eq!(ep.support_labels, vec![0]);
        assert_eq!(ep.query_labels, vec![0]);
    }

    #[test]
    fn identical_seed_gives_identical_episode() {
        let idx = fixture_index();
        let mut r1 = seeding::rng(33, &[seeding::stage::EPISODE]);
        let mut r2 = seeding::rng(33, &[seeding::stage::EPISODE]);
        let a = sample_episode(&idx, 3, 2, 4, &mut r1, 9).unwrap();
        let b = sample_episode(&idx, 3, 2, 4, &mut r2, 9).unwrap();
        assert_eq!(a.support_images, b.support_images);
        assert_eq!(a.query_images, b.query_images);
        assert_eq!(a.class_map, b.class_map);
    }

    #[test]
    fn labels_are_contiguous_and_counts_exact() {
        let idx = fixture_index();
        let mut rng = seeding::rng(5, &[seeding::stage::EPISODE]);
        let ep = sample_episode(&idx, 4, 3, 5, &mut rng, 0).unwrap();
        for l in 0..4 {
            assert_eq!(ep.support_labels.iter().filter(|&&x| x == l).count(), 3);
            assert_eq!(ep.query_labels.iter().filter(|&&x| x == l).count(), 5);
        }
        assert_eq!(ep.class_map.len(), 4);
        let unique: std::collections::HashSet<_> = ep.class_map.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn support_and_query_rows_are_disjoint() {
        let idx = fixture_index();
        let mut rng = seeding::rng(8, &[seeding::stage::EPISODE]);
        let ep = sample_episode(&idx, 2, 4, 4, &mut rng, 0).unwrap();
        // Same class rows must never coincide pixel-for-pixel (images within
        // a fixture class are all distinct by construction).
        for s in 0..ep.support_images.shape()[0] {
            for q in 0..ep.query_images.shape()[0] {
                if ep.support_labels[s] != ep.query_labels[q] {
                    continue;
                }
                let sim = ep.support_images.index_axis(ndarray::Axis(0), s);
                let qim = ep.query_images.index_axis(ndarray::Axis(0), q);
                assert!(
                    sim.iter().zip(qim.iter()).any(|(a, b)| a != b),
                    "support row {s} equals query row {q}"
                );
            }
        }
    }

    #[test]
    fn too_many_ways_is_an_error() {
        let idx = fixture_index();
        let mut rng = seeding::rng(5, &[seeding::stage::EPISODE]);
        let err = sample_episode(&idx, 100, 1, 1, &mut rng, 0).unwrap_err();
        assert!(matches!(err, Error::NotEnoughClasses { .. }));
    }

    #[test]
    fn too_many_shots_is_an_error_with_counts() {
        let idx = fixture_index();
        let mut rng = seeding::rng(5, &[seeding::stage::EPISODE]);
        let err = sample_episode(&idx, 2, 20, 20, &mut rng, 0).unwrap_err();
        match err {
            Error::ClassTooSmall { required, .. } => assert_eq!(required, 40),
            other => panic!("unexpected {other}"),
        }
    }
}
