//! Dataset ingestion, class-level splits, episodic task sampling, and the
//! stochastic two-view augmentation pipeline.

pub mod augment;
pub mod episode;
pub mod fixture;
pub mod index;

pub use augment::{augment_view, make_multiview, AugmentationPolicy, MultiViewBatch};
pub use episode::{sample_episode, EpisodeTask};
pub use fixture::{generate_fixture, FixtureSpec};
pub use index::{load_dataset, DatasetIndex, Split};
