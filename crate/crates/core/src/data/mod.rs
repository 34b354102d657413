//! Dataset ingestion, synthetic datasets, episodic sampling and test-time
//! degradations.

mod augment;
mod degrade;
mod episode;
mod image;
mod split;
mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use degrade::{apply_degradation, apply_degradations, Degradation, DegradationPreset};
pub use episode::{
    episodes_per_epoch, sample_episode, sample_training_batch, stack_images, Episode, EpisodeItem,
    EpisodeSpec,
};
pub use image::{bilinear_resize, decode_image, Image};
pub use split::{load_dataset, load_source, DatasetSplit, ImageRecord, SplitRole, Splits};
pub use synthetic::{generate_synthetic, SyntheticSource};
